import warnings

import pytest

from attnrefine.data import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_splits():
    """A small synthetic benchmark shared by tests that only need some data."""
    cfg = SyntheticConfig(n_train=48, n_val=16, n_test=16, seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_synthetic(cfg)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
