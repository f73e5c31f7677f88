"""Conversational orientation reasoning toolkit.

Symbolic egocentric-to-allocentric oracle, benchmark generation and
reasoning-trace evaluation on landmark grids.
"""

from .grid import Coord, GridEnvironment, Landmark, load_environment, neighbors
from .oracle import (
    CardinalDirection,
    Cue,
    DiagonalAmbiguity,
    InconsistentCues,
    OrientationProblem,
    Relation,
    abs_dir,
    delta,
    infer_facing,
    landmark_dir,
    solve,
)

__version__ = "0.1.0"
