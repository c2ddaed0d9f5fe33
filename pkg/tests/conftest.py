import sys
from pathlib import Path

import pytest

# Import from src/ without installing the package.
SRC = Path(__file__).resolve().parents[1] / "src"
if SRC.exists():
    sys.path.insert(0, str(SRC))


@pytest.fixture
def wall_world():
    """20 m x 20 m world with a 0.4 m x 4 m block whose near face is at x = 7.2."""
    from travnavsim.config import ObstacleSpec, WorldSpec
    from travnavsim.world.sim import make_world

    wall = ObstacleSpec(kind="solid_block", x=7.4, y=10.0, size_x=0.4, size_y=4.0)
    return make_world(WorldSpec(obstacles=[wall]), seed=0)
