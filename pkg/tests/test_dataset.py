from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from corbench.dataset import (
    COMBINATION_KEYS,
    PROTOCOLS,
    DataError,
    GenerationPlan,
    Instance,
    InvariantViolation,
    UnsatisfiablePlan,
    build_instance,
    check_instance,
    dataset_files,
    default_combination_counts,
    emit_baseline_prompt,
    emit_stage_records,
    enumerate_sites,
    generate,
    parse_coords,
    read_instances,
    render_gold_trace,
    serialize_multimodal,
    with_transcript,
    write_instances,
)
from corbench.grid import Coord, GridEnvironment, Landmark, shipped_environment
from corbench.noise import MAIN_SET_COUNTS, CorruptionConfig
from corbench.oracle import CardinalDirection as D, Relation as R, solve
from corbench.utterance import extract_relations, shipped_lexicon

GONGGUAN = shipped_environment("gongguan")
TAIPEI = shipped_environment("taipei_station")
EN = shipped_lexicon("en")

SMALL = GenerationPlan(
    combination_counts={k: 2 for k in COMBINATION_KEYS},
    split_sizes={"train": 20, "validation": 5, "test": 5},
    variation_count=4,
    cross_domain_count=6,
    ambiguity_count=6,
    language_mix={"zh-TW": 1.0, "en": 1.0},
    seed=5,
)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def test_enumerate_sites_examples():
    site = next(s for s in enumerate_sites(TAIPEI) if s.anchor.id == "bus_stop_2" and s.facing is D.NORTH)
    assert {r: lm.id for r, lm in site.relations.items()} == {
        R.FRONT: "Taipei_Main_Station_Exit_S3",
        R.LEFT: "Taipei_Main_Station_Exit_K7",
        R.RIGHT: "sports_store_1",
    }
    site = next(s for s in enumerate_sites(TAIPEI) if s.anchor.id == "park_4" and s.facing is D.WEST)
    assert set(site.relations) == set(R)
    lonely = GridEnvironment("x", (Landmark("a", Coord(0, 0)), Landmark("b", Coord(5, 5))))
    assert all(not s.relations for s in enumerate_sites(lonely))


def test_serialize_multimodal():
    coords = [("Taipei_Main_Station_Exit_S2", Coord(4, 4)), ("restaurant_5", Coord(4, 5)), ("Taipei_Main_Station_Exit_S3", Coord(3, 4))]
    m, t = serialize_multimodal("I am at Taipei Main Station Exit S2", coords)
    assert t == "Taipei_Main_Station_Exit_S2(4,4), restaurant_5(4,5), Taipei_Main_Station_Exit_S3(3,4)"
    assert m == f"Audio: I am at Taipei Main Station Exit S2 | Coordinates: {t}"
    assert parse_coords(t) == dict(coords)
    assert serialize_multimodal("x", coords[:1])[1] == "Taipei_Main_Station_Exit_S2(4,4)"
    with pytest.raises(DataError):
        parse_coords("a(1,2) b(3")


def test_quoted_scene_gold_facing_is_north():
    inst = build_instance(TAIPEI, "Taipei_Main_Station_Exit_S2", [(R.FRONT, "restaurant_5"), (R.LEFT, "Taipei_Main_Station_Exit_S3")], lexicon=EN)
    assert inst.facing is D.NORTH
    assert inst.multimodal_input.endswith(
        "| Coordinates: Taipei_Main_Station_Exit_S2(4,4), restaurant_5(4,5), Taipei_Main_Station_Exit_S3(3,4)"
    )


def test_labelled_single_cue_scene():
    inst = build_instance(GONGGUAN, "Gongguan_MRT_Exit_2", [(R.RIGHT, "restaurant_5")], lexicon=EN)
    assert inst.utterance == "I am at Gongguan MRT Exit 2, and restaurant 5 is on my right"
    assert inst.facing is D.NORTH


def test_gold_trace_examples():
    inst = build_instance(
        GONGGUAN, "Academic_Building_A",
        [(R.FRONT, "Student_Activity_Center_1"), (R.BACK, "Academic_Building_B"), (R.LEFT, "Parking_Lot_2"), (R.RIGHT, "Small_Plaza_2")],
        lexicon=EN,
    )
    trace, text = render_gold_trace(inst, EN)
    assert text.endswith("Therefore, the user is facing West.")
    assert trace.final_answer is D.WEST and len(trace.step3) == 4

    north = next(s for s in enumerate_sites(GONGGUAN) if s.facing is D.NORTH and R.FRONT in s.relations)
    one = build_instance(GONGGUAN, north.anchor.id, [(R.FRONT, north.relations[R.FRONT].id)], lexicon=EN)
    trace, _ = render_gold_trace(one, EN)
    assert one.facing is D.NORTH and len(trace.step3) == 1


def test_build_instance_rejects_bad_cues():
    with pytest.raises(InvariantViolation):
        build_instance(GONGGUAN, "Academic_Building_A", [(R.FRONT, "Academic_Building_B"), (R.LEFT, "Parking_Lot_2")], lexicon=EN)
    with pytest.raises(KeyError):
        build_instance(GONGGUAN, "Academic_Building_A", [(R.FRONT, "nowhere")], lexicon=EN)


def test_stage_records():
    inst = build_instance(GONGGUAN, "Academic_Building_A", [(R.BACK, "Academic_Building_B")], lexicon=EN)
    [(inp, target)] = emit_stage_records([inst], "S1")
    assert target == "Spatial relation 1 = behind, Reference landmark 1 = Academic Building B"
    assert emit_stage_records([inst], "S2") == [
        ("From = (7,1), To = (8,1)", "Direction vector: (8,1) - (7,1) = (1,0), Direction = East")
    ]
    [(inp, target)] = emit_stage_records([inst], "S3")
    assert target.endswith("Therefore, the user is facing West.")
    [(inp, target)] = emit_stage_records([inst], "S4")
    assert inp == inst.multimodal_input and target == render_gold_trace(inst, EN)[1]
    with pytest.raises(ValueError):
        emit_stage_records([inst], "S5")


def test_baseline_prompts():
    inst = build_instance(GONGGUAN, "Academic_Building_A", [(R.BACK, "Academic_Building_B")], lexicon=EN)
    b1 = emit_baseline_prompt(inst, "B1")
    assert b1.endswith("Please answer North, South, East, or West.\nAnswer:")
    assert "gym(4,6), pharmacy(4,7)" in emit_baseline_prompt(inst, "B2")
    assert emit_baseline_prompt("M", "B4") == "USER: M\nASSISTANT:"
    assert all(inst.multimodal_input in emit_baseline_prompt(inst, p) for p in PROTOCOLS)
    with pytest.raises(ValueError):
        emit_baseline_prompt(inst, "B9")


def test_default_combination_counts():
    counts = default_combination_counts()
    assert sum(counts.values()) == 4600
    assert [counts[k] for k in COMBINATION_KEYS[:4]] == [320] * 4
    assert max(counts.values()) - min(counts[k] for k in COMBINATION_KEYS[4:]) <= 19


def test_plan_validation_and_round_trip():
    assert GenerationPlan.from_dict(json.loads(json.dumps(SMALL.to_dict()))) == SMALL
    with pytest.raises(ValueError):
        GenerationPlan(split_sizes={"train": 1, "validation": 1, "test": 1})
    with pytest.raises(ValueError):
        GenerationPlan(combination_counts={"up": 3})
    with pytest.raises(ValueError):
        GenerationPlan.from_dict({"colour": "blue"})


def test_unsatisfiable_plan():
    env = GridEnvironment("gongguan", (Landmark("a", Coord(0, 0), {"zh-TW": "甲", "en": "A"}),))
    plan = GenerationPlan(
        combination_counts={"front+back": 3}, split_sizes={"train": 3, "validation": 0, "test": 0},
        variation_count=0, cross_domain_count=0, ambiguity_count=0,
    )
    with pytest.raises(UnsatisfiablePlan):
        generate(plan, envs={"gongguan": env})


def test_small_plan_counts_and_invariants(small):
    files = dataset_files(small)
    assert {k: len(v) for k, v in files.items()} == {
        "train": 20, "validation": 5, "test": 5, "cross_domain": 6, "ambiguity": 6,
    }
    assert len({i.id for i in small}) == len(small)
    for inst in small:
        env = shipped_environment(inst.env_id)
        check_instance(inst, env)
        assert solve(inst.problem(env)) is inst.facing
        assert 1 <= len(inst.cues) <= 4 and len({r for r, _, _ in inst.cues}) == len(inst.cues)
        if inst.split == "train" and inst.subset == "main":
            assert inst.transcript == inst.utterance
    assert sum(i.variation in ("word_order", "synonym") for i in small) == 4
    assert {i.env_id for i in files["cross_domain"]} == {"taipei_station"}


def test_generation_is_deterministic(small):
    again = generate(SMALL)
    assert [i.to_dict() for i in again] == [i.to_dict() for i in small]
    other = generate(GenerationPlan.from_dict({**SMALL.to_dict(), "seed": 6}))
    assert [i.to_dict() for i in other] != [i.to_dict() for i in small]


def test_jsonl_round_trip(small, tmp_path):
    path = tmp_path / "d.jsonl"
    write_instances(path, small)
    assert read_instances(path) == list(small)
    path.write_text(path.read_text(encoding="utf-8") + "{broken\n", encoding="utf-8")
    with pytest.raises(DataError, match=f":{len(small) + 1}: malformed JSON"):
        read_instances(path)


def test_with_transcript_revalidates(small):
    inst = next(i for i in small if i.subset == "main")
    env = shipped_environment(inst.env_id)
    noisy = with_transcript(inst, inst.utterance + "xx", env)
    assert noisy.multimodal_input.startswith(f"Audio: {inst.utterance}xx | ")
    assert noisy.cer > 0 and noisy.gold_trace == inst.gold_trace


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["zh-TW", "en"]))
def test_generated_instances_round_trip_through_dicts(seed, lang):
    plan = GenerationPlan(
        combination_counts={k: 1 for k in COMBINATION_KEYS},
        split_sizes={"train": 5, "validation": 5, "test": 5},
        variation_count=2, cross_domain_count=3, ambiguity_count=3,
        language_mix={lang: 1.0}, seed=seed,
        corruption=CorruptionConfig(target_cer=0.1),
        severity_mix=dict(MAIN_SET_COUNTS),
    )
    for inst in generate(plan):
        assert Instance.from_dict(json.loads(json.dumps(inst.to_dict()))) == inst
        if inst.variation in ("none", "word_order", "synonym"):
            env = shipped_environment(inst.env_id)
            got = Counter(c.pair for c in extract_relations(inst.utterance, shipped_lexicon(inst.language), env))
            assert got == Counter((r, lid) for r, lid, _ in inst.cues)
