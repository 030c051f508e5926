import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from simutil import make_bundle  # noqa: E402


@pytest.fixture(scope="session")
def sim_small_zero():
    """Zero-noise two-sensor bundle, ~10 keyframes."""
    return make_bundle(seed=2, noise=False, duration=24.0)


@pytest.fixture(scope="session")
def sim_small_noisy():
    """Paper-scale noise (2 cm range, 3 cm / 0.1 deg GINS), ~10 keyframes."""
    return make_bundle(seed=4, noise=True, duration=24.0)
