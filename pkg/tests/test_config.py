from pathlib import Path

import pytest

from kinuq.config import ExperimentConfig, load_config, parse_config
from kinuq.config import output_root as resolve_root
from kinuq.errors import ConfigurationError

REPO = Path(__file__).resolve().parents[1]

MINIMAL = """
[experiment]
id = "sod"
seed = 3
output_dir = "x"
"""


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.experiment == "sod" and cfg.seed == 3
    assert cfg.uq.controls == ("bgk",) and cfg.discretization.n_angle == 16
    assert cfg.source == MINIMAL and len(cfg.digest) == 64


def test_lists_become_tuples():
    cfg = parse_config(MINIMAL + '[uq]\ncontrols = ["bgk", "euler"]\ncounts = [10, 20]\n')
    assert cfg.uq.controls == ("bgk", "euler") and cfg.uq.counts == (10, 20)


@pytest.mark.parametrize(
    "extra, message",
    [
        ("[uq]\nKK = 3\n", "unknown key"),
        ("[solver]\nx = 1\n", "unknown section"),
        ("[physics]\neps = -1.0\n", "eps"),
        ("[physics]\nmu = \"fitted\"\n", "mu"),
        ("[discretization]\ncfl = 1.5\n", "cfl"),
        ("[discretization]\nn_velocity = 15\n", "n_velocity"),
        ("[uq]\nestimator = \"best\"\n", "estimator"),
        ("[uq]\ncontrols = [\"maxwellian\"]\n", "not available"),
        ("[surrogate]\ndata_source = \"dsmc\"\n", "data_source"),
        ("[calibration]\nbracket = [2.0, 1.0]\n", "bracket"),
    ],
)
def test_invalid_configs_rejected(extra, message):
    with pytest.raises(ConfigurationError, match=message):
        parse_config(MINIMAL + extra)


def test_header_errors():
    with pytest.raises(ConfigurationError, match="missing"):
        parse_config("[physics]\neps = 1.0\n")
    with pytest.raises(ConfigurationError, match="seed"):
        parse_config(MINIMAL.replace("seed = 3", 'seed = "three"'))
    with pytest.raises(ConfigurationError, match="experiment must be"):
        parse_config(MINIMAL.replace('"sod"', '"shock"'))
    with pytest.raises(ConfigurationError, match="malformed"):
        parse_config("[experiment\n")


def test_missing_file():
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config("/nonexistent/cfg.toml")


def test_needs_mu_star():
    assert not parse_config(MINIMAL).needs_mu_star()
    assert parse_config(MINIMAL + '[physics]\nmu = "calibrated"\n').needs_mu_star()


def test_output_root_env(output_root):
    cfg = parse_config(MINIMAL)
    assert cfg.output_path() == output_root / "x"
    assert resolve_root() == output_root
    assert cfg.resolve("/abs/path") == Path("/abs/path")


@pytest.mark.parametrize("path", sorted((REPO / "configs").rglob("*.toml")), ids=lambda p: str(p.relative_to(REPO)))
def test_shipped_configs_parse(path):
    assert isinstance(load_config(path), ExperimentConfig)

