import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from kinuq.collision import build_spectral_plan  # noqa: E402
from kinuq.grid import VelocityGrid  # noqa: E402
from kinuq.problems import TwoBump  # noqa: E402

settings.register_profile(
    "kinuq", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "kinuq"))

REPO = Path(__file__).resolve().parents[1]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.fixture(scope="session")
def grid64():
    return VelocityGrid(10.0, 64)


@pytest.fixture(scope="session")
def plan64(grid64):
    return build_spectral_plan(grid64)


@pytest.fixture(scope="session")
def two_bump():
    return TwoBump()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("KINUQ_OUTPUT_ROOT", str(tmp_path))
    return tmp_path


# ------------------------------------------------------- acceptance report

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        measured = dict(item.user_properties).get("measured", "")
        _ACCEPTANCE[number] = (title, report.outcome, measured)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome, measured = _ACCEPTANCE[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{status}] criterion {number:2d}: {title}"
        if measured:
            line += f" | {measured}"
        terminalreporter.write_line(line)
