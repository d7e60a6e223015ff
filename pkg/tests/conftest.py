import numpy as np
import pytest

from diffcarl.env import default_config_2mg
from diffcarl.profiles import TimeSeriesProfile, nominal_profile, synthesize


def flat_day(load=0.0, price=0.0, pv=0.0, wt=0.0, start="2024-01-01", hours=24) -> TimeSeriesProfile:
    ts = np.datetime64(start, "h") + np.arange(hours) * np.timedelta64(1, "h")
    full = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (hours,)).copy()
    return TimeSeriesProfile(ts, full(pv), full(wt), full(load), full(price))


@pytest.fixture
def config2():
    return default_config_2mg()


@pytest.fixture(scope="session")
def month():
    return synthesize(nominal_profile("2024-01-01", 31), 0.2, seed=0)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
