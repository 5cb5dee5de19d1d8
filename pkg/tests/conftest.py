"""Shared helpers for the test suite."""

import numpy as np
import pytest


def lattice_frames(rng, t, c, h, w):
    """Random frames whose values sit on the 1/256 grid in [0, 1)."""
    return rng.integers(0, 256, size=(t, c, h, w)).astype(np.float64) / 256.0


@pytest.fixture
def rng():
    return np.random.default_rng(0)
