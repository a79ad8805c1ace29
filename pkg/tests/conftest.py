import numpy as np
import pytest

from caecodec.network import CaeArchitecture, CaeParams

TOY_FILTERS = (8, 8, 16, 16, 16, 8)


@pytest.fixture(scope="session")
def toy_params():
    """Untrained but deterministic toy model with 32x32 patches."""
    return CaeParams.initialize(CaeArchitecture(TOY_FILTERS, 32), seed=1)


@pytest.fixture(scope="session")
def rgb_image():
    from helpers import smooth_image

    return smooth_image(np.random.default_rng(7), 70, 90, channels=3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
