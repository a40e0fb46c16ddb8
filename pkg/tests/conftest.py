import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    from stimdecode.dataset import SyntheticConfig, generate_synthetic

    cfg = SyntheticConfig(n_subjects=2, duration_s=120.0, n_channels=6, snr_db=-10.0,
                          unattended_leak_db=-6.0, seed=3)
    return generate_synthetic(cfg)
