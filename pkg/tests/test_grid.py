from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from corbench.grid import (
    Coord,
    EnvironmentFileError,
    GridEnvironment,
    Landmark,
    SHIPPED_ENVIRONMENTS,
    dump_environment,
    load_environment,
    neighbors,
    resolve_environment,
    shipped_environment,
)
from corbench.oracle import CardinalDirection as D


def _doc(*landmarks, width=10, height=10):
    return {
        "id": "t",
        "width": width,
        "height": height,
        "landmarks": [{"id": i, "position": list(p), "names": {"en": i}} for i, p in landmarks],
    }


def test_load_two_landmarks():
    env = load_environment(_doc(("Taipei_Main_Station_Exit_S2", (4, 4)), ("restaurant_5", (4, 5))))
    assert len(env.landmarks) == 2
    assert env.position("restaurant_5") == Coord(4, 5)
    assert env.at(Coord(4, 4)).id == "Taipei_Main_Station_Exit_S2"


def test_empty_environment_is_valid():
    env = load_environment(_doc())
    assert env.landmarks == ()
    assert neighbors(env, Coord(5, 5)) == {}


@pytest.mark.parametrize(
    "doc, fragment",
    [
        (_doc(("a", (3, 3)), ("b", (3, 3))), "share position (3,3)"),
        (_doc(("a", (3, 3)), ("a", (3, 4))), "duplicate landmark id a"),
        (_doc(("a", (10, 3))), "outside"),
        (_doc(("a", (-1, 0))), "outside"),
    ],
)
def test_invariant_violations_name_the_landmark(doc, fragment):
    with pytest.raises(EnvironmentFileError, match=fragment.replace("(", r"\(").replace(")", r"\)")):
        load_environment(doc)


@pytest.mark.parametrize("text", ["{not json", "[]", '{"landmarks": {}}', '{"landmarks": [{"id": "a"}]}',
                                  '{"landmarks": [{"id": "a", "position": [1.5, 2]}]}'])
def test_malformed_documents(text):
    with pytest.raises(EnvironmentFileError):
        load_environment(text)


def test_load_from_path_and_text(tmp_path):
    path = tmp_path / "env.json"
    path.write_text(json.dumps(_doc(("a", (0, 0)))), encoding="utf-8")
    assert load_environment(path) == load_environment(path.read_text(encoding="utf-8"))
    assert resolve_environment(str(path)).id == "t"
    with pytest.raises(FileNotFoundError):
        resolve_environment(str(tmp_path / "missing.json"))


@pytest.mark.parametrize("env_id", SHIPPED_ENVIRONMENTS)
def test_shipped_round_trip(env_id):
    env = shipped_environment(env_id)
    assert load_environment(dump_environment(env)) == env
    for lm in env.landmarks:
        assert env.at(lm.position) is env.landmark(lm.id)
        assert {"zh-TW", "en"} <= set(lm.names)


def test_neighbors_of_quoted_scenes():
    env = shipped_environment("taipei_station")
    got = {d: lm.id for d, lm in neighbors(env, Coord(3, 3)).items()}
    assert got == {D.NORTH: "Taipei_Main_Station_Exit_S3", D.WEST: "Taipei_Main_Station_Exit_K7", D.EAST: "sports_store_1"}
    got = {d: lm.id for d, lm in neighbors(env, Coord(8, 5)).items()}
    assert got == {D.WEST: "drink_shop_4", D.EAST: "bar_1", D.SOUTH: "bakery_3", D.NORTH: "bar_2"}


def test_neighbors_out_of_bounds():
    with pytest.raises(EnvironmentFileError):
        neighbors(shipped_environment("gongguan"), Coord(10, 0))


def test_unknown_landmark_lookup():
    with pytest.raises(KeyError, match="nowhere"):
        shipped_environment("gongguan").landmark("nowhere")
    with pytest.raises(KeyError):
        shipped_environment("atlantis")


cells = st.tuples(st.integers(0, 9), st.integers(0, 9))


@given(st.sets(cells, max_size=30), cells)
def test_neighbors_are_exactly_the_occupied_adjacent_cells(occupied, at):
    env = GridEnvironment("h", tuple(Landmark(f"l{x}_{y}", Coord(x, y)) for x, y in sorted(occupied)))
    got = neighbors(env, Coord(*at))
    for d in D:
        cell = (at[0] + d.unit[0], at[1] + d.unit[1])
        if cell in occupied:
            assert got[d].position == cell
        else:
            assert d not in got


@given(st.sets(cells, max_size=40))
def test_id_and_position_lookup_are_inverse(occupied):
    env = GridEnvironment("h", tuple(Landmark(f"l{x}_{y}", Coord(x, y)) for x, y in sorted(occupied)))
    for lm in env.landmarks:
        assert env.landmark(env.at(lm.position).id) is lm
    assert load_environment(dump_environment(env)) == env
