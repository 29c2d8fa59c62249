import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lssm.field import Grid, SpectralVelocity  # noqa: E402


@pytest.fixture
def grid16():
    return Grid(16)


@pytest.fixture
def grid32():
    return Grid(32)


def shear(grid, amp=1.0):
    """``amp * sin(x2) e1``."""
    return SpectralVelocity.from_modes(grid, [((0, 1, 0), (amp, 0.0, 0.0), "sin")])


def random_velocity(grid, seed, kmax=3, energy=None):
    from lssm.integrate import random_field

    rng = np.random.default_rng(seed)
    e = energy if energy is not None else float(rng.uniform(0.1, 10.0))
    return random_field(grid, rng, kmax, e)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


TWO_PI = 2 * math.pi
