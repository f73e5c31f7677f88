"""Egocentric to allocentric orientation engine.

Coordinates are integer grid cells with x growing eastward and y growing
northward.  A quarter turn "clockwise" follows the compass (N -> E -> S -> W).
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .grid import Coord


class CardinalDirection(str, enum.Enum):
    NORTH = "North"
    EAST = "East"
    SOUTH = "South"
    WEST = "West"

    def cw90(self) -> CardinalDirection:
        return _COMPASS[(_COMPASS.index(self) + 1) % 4]

    def ccw90(self) -> CardinalDirection:
        return _COMPASS[(_COMPASS.index(self) + 3) % 4]

    def opposite(self) -> CardinalDirection:
        return _COMPASS[(_COMPASS.index(self) + 2) % 4]

    @property
    def unit(self) -> Coord:
        return _UNIT[self]

    @classmethod
    def parse(cls, token: str) -> CardinalDirection:
        key = token.strip().lower()
        for d in cls:
            if key in (d.value.lower(), d.value[0].lower()):
                return d
        raise ValueError(f"not a cardinal direction: {token!r}")


_COMPASS = (
    CardinalDirection.NORTH,
    CardinalDirection.EAST,
    CardinalDirection.SOUTH,
    CardinalDirection.WEST,
)
_UNIT = {
    CardinalDirection.NORTH: Coord(0, 1),
    CardinalDirection.EAST: Coord(1, 0),
    CardinalDirection.SOUTH: Coord(0, -1),
    CardinalDirection.WEST: Coord(-1, 0),
}


class Relation(str, enum.Enum):
    FRONT = "front"
    BACK = "back"
    LEFT = "left"
    RIGHT = "right"

    @classmethod
    def parse(cls, token: str) -> Relation:
        key = token.strip().lower()
        if key == "behind":
            return cls.BACK
        return cls(key)

    def opposite(self) -> Relation:
        return _OPPOSITE_REL[self]


_OPPOSITE_REL = {
    Relation.FRONT: Relation.BACK,
    Relation.BACK: Relation.FRONT,
    Relation.LEFT: Relation.RIGHT,
    Relation.RIGHT: Relation.LEFT,
}

# canonical cue ordering used wherever an order is not otherwise given
RELATION_ORDER = (Relation.FRONT, Relation.BACK, Relation.LEFT, Relation.RIGHT)


class OrientationError(ValueError):
    pass


class DiagonalAmbiguity(OrientationError):
    def __init__(self, vector: Coord, cue: Cue | None = None):
        self.vector = vector
        self.cue = cue
        where = f" (cue {cue.relation.value} {cue.landmark_id})" if cue else ""
        super().__init__(f"offset {vector} is diagonal, no dominant axis{where}")


class InconsistentCues(OrientationError):
    def __init__(self, verdicts: Sequence[tuple[Cue, CardinalDirection]]):
        self.verdicts = list(verdicts)
        parts = ", ".join(
            f"{c.relation.value} {c.landmark_id} -> {d.value}" for c, d in self.verdicts
        )
        super().__init__(f"cues imply different facings: {parts}")


@dataclass(frozen=True)
class Cue:
    relation: Relation
    landmark_id: str
    landmark_pos: Coord


@dataclass(frozen=True)
class OrientationProblem:
    user_pos: Coord
    cues: tuple[Cue, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "cues", tuple(self.cues))
        if not self.cues:
            raise OrientationError("an orientation problem needs at least one cue")
        for cue in self.cues:
            if tuple(cue.landmark_pos) == tuple(self.user_pos):
                raise OrientationError(f"cue landmark {cue.landmark_id} sits on the user")


def delta(user: Coord, landmark: Coord) -> Coord:
    return Coord(landmark[0] - user[0], landmark[1] - user[1])


def abs_dir(d: Coord) -> CardinalDirection:
    """Compass direction of an offset, by its dominant axis."""
    dx, dy = d
    if abs(dx) == abs(dy):
        raise DiagonalAmbiguity(Coord(dx, dy))
    if abs(dx) > abs(dy):
        return CardinalDirection.EAST if dx > 0 else CardinalDirection.WEST
    return CardinalDirection.NORTH if dy > 0 else CardinalDirection.SOUTH


def landmark_dir(facing: CardinalDirection, q: Relation) -> CardinalDirection:
    """Where a landmark lies for a user facing `facing` who calls it `q`."""
    if q is Relation.FRONT:
        return facing
    if q is Relation.BACK:
        return facing.opposite()
    if q is Relation.LEFT:
        return facing.ccw90()
    return facing.cw90()


def infer_facing(d_abs: CardinalDirection, q: Relation) -> CardinalDirection:
    """Inverse of :func:`landmark_dir` in its first argument."""
    if q is Relation.FRONT:
        return d_abs
    if q is Relation.BACK:
        return d_abs.opposite()
    if q is Relation.LEFT:
        return d_abs.cw90()
    return d_abs.ccw90()


def cue_facing(user: Coord, cue: Cue) -> CardinalDirection:
    try:
        d = abs_dir(delta(user, cue.landmark_pos))
    except DiagonalAmbiguity as exc:
        raise DiagonalAmbiguity(exc.vector, cue) from None
    return infer_facing(d, cue.relation)


def solve(problem: OrientationProblem) -> CardinalDirection:
    verdicts = [(cue, cue_facing(problem.user_pos, cue)) for cue in problem.cues]
    facings = Counter(f for _, f in verdicts)
    if len(facings) != 1:
        raise InconsistentCues(verdicts)
    return verdicts[0][1]


def facings_for(user: Coord, cues: Iterable[Cue]) -> list[CardinalDirection]:
    return [cue_facing(user, c) for c in cues]
