"""Command-line entry point: ``kinuq run|calibrate|train|convergence|inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import OUTPUT_ROOT_ENV, load_config
from .errors import KinUQError
from .experiments import convergence_study, run_calibration, run_experiment
from .net import load_checkpoint

TRAIN_IDS = ("train-hom", "train-nonhom")


def _run(args) -> int:
    cfg = load_config(args.config)
    out = run_experiment(cfg, jobs=args.jobs)
    print(out)
    return 0


def _calibrate(args) -> int:
    cfg = load_config(args.config)
    out = run_experiment(cfg, jobs=args.jobs, runner=run_calibration)
    print(out)
    return 0


def _train(args) -> int:
    cfg = load_config(args.config)
    if cfg.experiment not in TRAIN_IDS:
        raise KinUQError(f"'train' needs an experiment id in {TRAIN_IDS}, got {cfg.experiment!r}")
    print(run_experiment(cfg, jobs=args.jobs))
    return 0


def _convergence(args) -> int:
    cfg = load_config(args.config)
    print(run_experiment(cfg, jobs=args.jobs, runner=convergence_study))
    return 0


def _inspect(args) -> int:
    path = Path(args.checkpoint)
    try:
        params, meta = load_checkpoint(path)
    except OSError as exc:
        raise KinUQError(f"cannot read checkpoint {path}: {exc}") from exc
    report = {
        "path": str(path),
        "layer_dims": list(params.layer_dims),
        "activation": params.activation,
        "n_params": params.n_params,
        "seed": params.seed,
        "metadata": {k: v for k, v in meta.items() if k != "baseline"},
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinuq",
        description=f"Multi-fidelity uncertainty quantification for kinetic equations. "
        f"Relative output directories are placed under ${OUTPUT_ROOT_ENV} (default ./runs).",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, text in (
        ("run", _run, "run the experiment named in the config"),
        ("calibrate", _calibrate, "entropy calibration of the BGK relaxation frequency"),
        ("train", _train, "train a surrogate (train-hom or train-nonhom config)"),
        ("convergence", _convergence, "sampling-error convergence study"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="experiment TOML file")
        p.add_argument("--jobs", type=int, default=1, help="maximum worker threads for sample evaluation")
        p.set_defaults(func=fn)
    p = sub.add_parser("inspect", help="print the header of a network checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except KinUQError as exc:
        print(f"kinuq: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
