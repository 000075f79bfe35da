import os

import pytest
from hypothesis import HealthCheck, settings

from evcs_ems.config import StationConfig, replace

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def cfg() -> StationConfig:
    return StationConfig()


@pytest.fixture
def tight(cfg):
    """Real-time hyperparameters tight enough for 1e-3 kW comparisons."""
    return replace(cfg.realtime, eps_abs=1e-6, eps_rel=1e-7, max_inner=20000)


@pytest.fixture(scope="session")
def desk_report():
    from evcs_ems.scenario import desk_scenario
    from evcs_ems.sim import run_day
    return run_day(desk_scenario(), StationConfig())


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or \
        __import__("sys").modules.get("tests.test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
