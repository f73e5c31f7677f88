"""Discrete landmark grids and their JSON environment files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, NamedTuple


class Coord(NamedTuple):
    x: int
    y: int

    def __str__(self) -> str:
        return f"({self.x},{self.y})"


class EnvironmentFileError(ValueError):
    """Malformed or invariant-violating environment document."""


@dataclass(frozen=True)
class Landmark:
    id: str
    position: Coord
    names: Mapping[str, str] = field(default_factory=dict)
    category: str = ""

    def name(self, language: str) -> str:
        try:
            return self.names[language]
        except KeyError:
            raise KeyError(f"landmark {self.id} has no {language} display name") from None


@dataclass(frozen=True)
class GridEnvironment:
    id: str
    landmarks: tuple[Landmark, ...] = ()
    width: int = 10
    height: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        if self.width <= 0 or self.height <= 0:
            raise EnvironmentFileError(f"{self.id}: grid size must be positive")
        by_id: dict[str, Landmark] = {}
        by_pos: dict[Coord, Landmark] = {}
        for lm in self.landmarks:
            if not self.contains(lm.position):
                raise EnvironmentFileError(
                    f"{self.id}: landmark {lm.id} at {lm.position} is outside "
                    f"the {self.width}x{self.height} grid"
                )
            if lm.id in by_id:
                raise EnvironmentFileError(f"{self.id}: duplicate landmark id {lm.id} at {lm.position}")
            if lm.position in by_pos:
                other = by_pos[lm.position]
                raise EnvironmentFileError(
                    f"{self.id}: landmarks {other.id} and {lm.id} share position {lm.position}"
                )
            by_id[lm.id] = lm
            by_pos[lm.position] = lm
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_by_pos", by_pos)

    def contains(self, at: Coord) -> bool:
        return 0 <= at[0] < self.width and 0 <= at[1] < self.height

    def landmark(self, landmark_id: str) -> Landmark:
        try:
            return self._by_id[landmark_id]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"unknown landmark {landmark_id!r} in environment {self.id}") from None

    def at(self, pos: Coord) -> Landmark | None:
        return self._by_pos.get(Coord(*pos))  # type: ignore[attr-defined]

    def __contains__(self, landmark_id: object) -> bool:
        return landmark_id in self._by_id  # type: ignore[attr-defined]

    def position(self, landmark_id: str) -> Coord:
        return self.landmark(landmark_id).position

    @property
    def languages(self) -> set[str]:
        return {lang for lm in self.landmarks for lang in lm.names}


def neighbors(env: GridEnvironment, at: Coord) -> dict:
    """Landmarks on the four axis-adjacent cells of `at`, keyed by direction."""
    from .oracle import CardinalDirection

    at = Coord(*at)
    if not env.contains(at):
        raise EnvironmentFileError(f"{at} is outside environment {env.id}")
    found = {}
    for d in CardinalDirection:
        dx, dy = d.unit
        lm = env.at(Coord(at.x + dx, at.y + dy))
        if lm is not None:
            found[d] = lm
    return found


def _parse_landmark(raw: Any, index: int) -> Landmark:
    if not isinstance(raw, dict):
        raise EnvironmentFileError(f"landmark #{index} is not an object")
    try:
        lid = raw["id"]
        x, y = raw["position"]
    except (KeyError, TypeError, ValueError) as exc:
        raise EnvironmentFileError(f"landmark #{index} ({raw.get('id', '?')}): bad field {exc}") from None
    if not isinstance(lid, str) or not lid:
        raise EnvironmentFileError(f"landmark #{index}: id must be a non-empty string")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in (x, y)):
        raise EnvironmentFileError(f"landmark {lid}: position must be two integers, got {raw['position']}")
    names = raw.get("names", {})
    if not isinstance(names, dict) or not all(isinstance(v, str) for v in names.values()):
        raise EnvironmentFileError(f"landmark {lid}: names must map language tags to strings")
    return Landmark(lid, Coord(x, y), dict(names), raw.get("category", ""))


def environment_from_dict(doc: Mapping[str, Any]) -> GridEnvironment:
    if not isinstance(doc, Mapping):
        raise EnvironmentFileError("environment document must be a JSON object")
    raw_landmarks = doc.get("landmarks", [])
    if not isinstance(raw_landmarks, list):
        raise EnvironmentFileError("'landmarks' must be a list")
    try:
        width = int(doc.get("width", 10))
        height = int(doc.get("height", 10))
    except (TypeError, ValueError):
        raise EnvironmentFileError("width/height must be integers") from None
    return GridEnvironment(
        id=str(doc.get("id", "")),
        landmarks=tuple(_parse_landmark(raw, i) for i, raw in enumerate(raw_landmarks)),
        width=width,
        height=height,
    )


def load_environment(source: str | Path | Mapping[str, Any]) -> GridEnvironment:
    """Load and validate an environment.

    `source` may be a parsed mapping, a path, or the JSON text itself.
    """
    if isinstance(source, Mapping):
        return environment_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith(("{", "["))):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EnvironmentFileError(f"environment is not valid JSON: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return environment_from_dict(doc)


def environment_to_dict(env: GridEnvironment) -> dict[str, Any]:
    return {
        "id": env.id,
        "width": env.width,
        "height": env.height,
        "landmarks": [
            {
                "id": lm.id,
                "position": [lm.position.x, lm.position.y],
                "names": dict(lm.names),
                "category": lm.category,
            }
            for lm in env.landmarks
        ],
    }


def dump_environment(env: GridEnvironment) -> str:
    return json.dumps(environment_to_dict(env), ensure_ascii=False, indent=2) + "\n"


SHIPPED_ENVIRONMENTS = ("gongguan", "taipei_station")


def _data_file(*parts: str):
    return resources.files("corbench").joinpath("data", *parts)


@lru_cache(maxsize=None)
def shipped_environment(env_id: str) -> GridEnvironment:
    if env_id not in SHIPPED_ENVIRONMENTS:
        raise KeyError(f"no shipped environment named {env_id!r}")
    return load_environment(_data_file("environments", f"{env_id}.json").read_text(encoding="utf-8"))


def shipped_manifest() -> dict[str, Any]:
    return json.loads(_data_file("environments", "manifest.json").read_text(encoding="utf-8"))


def resolve_environment(ref: str | Path) -> GridEnvironment:
    """A shipped environment by id, otherwise a path to a JSON file."""
    if isinstance(ref, str) and ref in SHIPPED_ENVIRONMENTS:
        return shipped_environment(ref)
    path = Path(ref)
    if not path.exists():
        raise FileNotFoundError(f"environment file not found: {path}")
    return load_environment(path)
