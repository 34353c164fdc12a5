import numpy as np
import pytest

from scatarousal.data import SynthConfig, synth_generate
from scatarousal.filterbank import FilterBankConfig, build_filterbank


@pytest.fixture(scope="session")
def fb():
    return build_filterbank(FilterBankConfig())


@pytest.fixture(scope="session")
def fb0():
    return build_filterbank(FilterBankConfig(include_order0=True))


@pytest.fixture(scope="session")
def small_records():
    cfg = SynthConfig(n_records=14, duration_s=120.0, seed=11)
    return synth_generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the assertion itself stays in the test."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
