import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixtures import grid_box, hinge_wall_rod, simple_box  # noqa: E402


@pytest.fixture
def box56():
    """Grid-subdivided unit box: 56 vertices, 108 faces."""
    return grid_box(3)


@pytest.fixture
def hinge():
    """(wall, rod, joint): a fixed wall and a revolute rod sweeping through it."""
    return hinge_wall_rod()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
