import numpy as np
import pytest

import mnmt.tensor as tt


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running end-to-end experiment tests")


@pytest.fixture
def f64():
    """Run a test in 64-bit mode (gradient checks), then restore 32-bit."""
    tt.set_default_dtype(np.float64)
    yield
    tt.set_default_dtype(np.float32)
