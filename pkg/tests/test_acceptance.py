"""Acceptance gate: one test per criterion, each printed as PASS/FAIL in the summary."""

from __future__ import annotations

import random
import time
from collections import Counter

import pytest

from corbench.dataset import (
    COMBINATION_KEYS,
    build_instance,
    combo_key,
    dataset_files,
    emit_baseline_prompt,
    render_gold_trace,
    with_transcript,
)
from corbench.grid import Coord, shipped_environment
from corbench.noise import (
    MAIN_SET_COUNTS,
    SEVERITY_LABELS,
    CorruptionConfig,
    assign_severity_targets,
    cer,
    classify_severity,
    corrupt,
)
from corbench.oracle import (
    CardinalDirection as D,
    Cue,
    OrientationProblem,
    Relation as R,
    abs_dir,
    delta,
    infer_facing,
    landmark_dir,
    solve,
)
from corbench.traces import FormatError, evaluate, parse_trace
from corbench.utterance import extract_relations, shipped_lexicon
from support import default_dataset, fixture_text, plant_errors

N, E, S, W = D.NORTH, D.EAST, D.SOUTH, D.WEST

# Relative-to-absolute mapping table, transcribed cell by cell:
# facing -> (front, back, right, left)
TABLE_1 = {
    N: (N, S, E, W),
    E: (E, W, S, N),
    S: (S, N, W, E),
    W: (W, E, N, S),
}


@pytest.mark.criterion(1, "rule-table equivalence (16 cells, inverse on all 16)")
def test_criterion_1_rule_table():
    start = time.perf_counter()
    for facing, (front, back, right, left) in TABLE_1.items():
        for q, expected in ((R.FRONT, front), (R.BACK, back), (R.RIGHT, right), (R.LEFT, left)):
            assert landmark_dir(facing, q) is expected, (facing, q)
            assert infer_facing(expected, q) is facing, (expected, q)
    assert time.perf_counter() - start < 1.0


# (to, from, stated vector, stated direction) quoted in the worked examples
QUOTED_VECTORS = [
    ((4, 5), (4, 4), (0, 1), N),
    ((3, 4), (4, 4), (-1, 0), W),
    ((3, 4), (3, 3), (0, 1), N),
    ((4, 3), (3, 3), (1, 0), E),
    ((8, 5), (7, 5), (1, 0), E),
    ((7, 5), (8, 5), (-1, 0), W),
    ((8, 4), (8, 5), (0, -1), S),
    ((8, 6), (8, 5), (0, 1), N),
    ((1, 0), (0, 0), (1, 0), E),
    ((6, 1), (7, 1), (-1, 0), W),
    ((8, 1), (7, 1), (1, 0), E),
    ((7, 0), (7, 1), (0, -1), S),
    ((7, 2), (7, 1), (0, 1), N),
    ((4, 7), (4, 6), (0, 1), N),
    ((0, 1), (0, 0), (0, 1), N),
]

GOLD_SCENES = [
    # user, cues, gold facing
    ((4, 4), [(R.FRONT, (4, 5)), (R.LEFT, (3, 4))], N),
    ((3, 3), [(R.FRONT, (3, 4)), (R.LEFT, (2, 3)), (R.RIGHT, (4, 3))], N),
    ((8, 5), [(R.FRONT, (7, 5)), (R.BACK, (9, 5)), (R.LEFT, (8, 4)), (R.RIGHT, (8, 6))], W),
    ((7, 1), [(R.FRONT, (6, 1)), (R.BACK, (8, 1)), (R.LEFT, (7, 0)), (R.RIGHT, (7, 2))], W),
]


@pytest.mark.criterion(2, "worked-example vectors, directions and gold facings")
def test_criterion_2_worked_examples():
    start = time.perf_counter()
    for to, frm, vec, direction in QUOTED_VECTORS:
        assert delta(Coord(*frm), Coord(*to)) == vec
        assert abs_dir(Coord(*vec)) is direction
    # single-step exercises: East + behind, and the two chain-of-thought exemplars
    assert infer_facing(E, R.BACK) is W
    assert infer_facing(N, R.FRONT) is N
    assert infer_facing(N, R.BACK) is S
    for user, cues, facing in GOLD_SCENES:
        problem = OrientationProblem(Coord(*user), tuple(Cue(q, f"l{i}", Coord(*p)) for i, (q, p) in enumerate(cues)))
        assert solve(problem) is facing
    assert time.perf_counter() - start < 1.0


@pytest.mark.criterion(3, "dataset reproduction: 4,600 = 3,216/688/696, 320 per single, 540 + 200, oracle round-trip")
def test_criterion_3_dataset():
    instances, elapsed = default_dataset()
    assert elapsed < 60.0
    files = dataset_files(instances)
    assert {k: len(v) for k, v in files.items()} == {
        "train": 3216,
        "validation": 688,
        "test": 696,
        "cross_domain": 540,
        "ambiguity": 200,
    }
    main = [i for i in instances if i.id.startswith("main-")]
    assert len(main) == 4600
    combos = Counter(combo_key(r for r, _, _ in i.cues) for i in main)
    for key in COMBINATION_KEYS[:4]:
        assert combos[key] == 320
    assert sum(combos.values()) == 4600
    envs = {}
    for inst in instances:
        env = envs.setdefault(inst.env_id, shipped_environment(inst.env_id))
        assert solve(inst.problem(env)) is inst.facing
    assert len({i.id for i in instances}) == len(instances)


@pytest.mark.criterion(4, "evaluator ceiling on gold traces: 100.0 / 0.0 / 1.000, clean and noisy")
def test_criterion_4_ceiling():
    instances, _ = default_dataset()
    start = time.perf_counter()
    test = dataset_files(instances)["test"]
    env = shipped_environment(test[0].env_id)
    clean = [with_transcript(i, i.utterance, env) for i in test]
    for split in (test, clean):
        outputs = {i.id: render_gold_trace(i, shipped_lexicon(i.language))[1] for i in split}
        report = evaluate(split, outputs)
        assert report.accuracy == 1.0
        assert report.format_error_rate == 0.0
        assert report.mean_reasoning_quality == 1.0
        assert f"{100 * report.accuracy:.1f} / {100 * report.format_error_rate:.1f} / {report.mean_reasoning_quality:.3f}" == "100.0 / 0.0 / 1.000"
    assert any(i.transcript != i.utterance for i in test)
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion(5, "planted errors: 683/696 = 98.1%, taxonomy {direction 9, relation 2, asr 3}")
def test_criterion_5_planted():
    instances, _ = default_dataset()
    start = time.perf_counter()
    test = dataset_files(instances)["test"]
    planted_set, outputs, planted = plant_errors(test)
    assert {k: len(v) for k, v in planted.items()} == {"direction": 9, "relation": 2, "asr": 3}
    report = evaluate(planted_set, outputs)
    assert sum(s.correct for s in report.scores) == 683
    assert f"{100 * report.accuracy:.1f}" == "98.1"
    assert report.taxonomy_counts == {
        "direction_understanding": 9,
        "relation_extraction": 2,
        "asr_misrecognition": 3,
    }
    by_id = {s.instance_id: s.taxonomy for s in report.scores}
    assert len({i for ids in planted.values() for i in ids}) == 13
    assert all(by_id[i] == {"direction_understanding"} for i in planted["direction"])
    both = set(planted["relation"]) & set(planted["asr"])
    assert len(both) == 1
    assert all(by_id[i] == {"relation_extraction", "asr_misrecognition"} for i in both)
    assert all(by_id[i] == {"relation_extraction"} for i in set(planted["relation"]) - both)
    assert all(by_id[i] == {"asr_misrecognition"} for i in set(planted["asr"]) - both)
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion(6, "noise calibration: CER 0.10 within 0.02 on 1,000 texts; main severity mix within 2 points over 5,000")
def test_criterion_6_noise():
    instances, _ = default_dataset()
    start = time.perf_counter()
    pool = [(i.utterance, i.language) for i in instances if len(i.utterance) >= 20]
    lexes = {lang: shipped_lexicon(lang) for lang in {l for _, l in pool}}
    rng = random.Random(6)
    sample = rng.sample(pool, 1000)
    for k, (text, lang) in enumerate(sample):
        transcript, achieved = corrupt(text, CorruptionConfig(target_cer=0.10, seed=k), lexes[lang])
        assert achieved == cer(text, transcript)
        assert abs(achieved - 0.10) <= 0.02 + 1e-9, (text, transcript, achieved)

    corpus = [pool[rng.randrange(len(pool))] for _ in range(5000)]
    targets = assign_severity_targets([len(t) for t, _ in corpus], MAIN_SET_COUNTS, random.Random(60))
    labels = Counter()
    for k, ((text, lang), (_, target)) in enumerate(zip(corpus, targets)):
        transcript, _ = corrupt(text, CorruptionConfig(target_cer=target, seed=10_000 + k), lexes[lang])
        labels[classify_severity(text, transcript)] += 1
    expected = {"perfect": 14.5, "minor": 31.9, "moderate": 37.1, "major": 14.7, "severe": 1.9}
    for label in SEVERITY_LABELS:
        assert abs(100 * labels[label] / 5000 - expected[label]) <= 2.0, (label, labels)
    assert time.perf_counter() - start < 60.0


def _malformed_variants() -> list[str]:
    good = fixture_text("four_cue_gold_trace.txt")
    zh = render_gold_trace(
        build_instance(
            shipped_environment("gongguan"),
            "Academic_Building_A",
            [(R.FRONT, "Student_Activity_Center_1"), (R.LEFT, "Parking_Lot_2")],
        ),
        shipped_lexicon("zh-TW"),
    )[1]
    lines = good.splitlines()
    drop = lambda *idx: "\n".join(l for k, l in enumerate(lines) if k not in idx)  # noqa: E731
    return [
        "North",
        "",
        drop(0, 1, 2, 3, 4),  # no step 1
        drop(5, 6, 7, 8, 9),  # no step 2
        drop(10, 11, 12, 13, 14),  # no step 3 (and so no conclusion)
        drop(15),  # no final answer
        good.replace("Direction = West", "Direction = Northwest", 1),
        good.replace("Direction = East", "Direction = Up", 1),
        good.replace("facing West.\nAcademic", "facing Westish.\nAcademic", 1),
        good.replace("Therefore, the user is facing West.", "Therefore, the user is facing the exit."),
        good.replace("Therefore, the user is facing West.", "Therefore, the user is lost."),
        good.replace("Spatial relation 1 = front", "Spatial relation 1 = above"),
        good.replace("Spatial relation 3 = left", "Spatial relation 3 = sideways"),
        good.replace(", Direction = South", ""),
        good.replace("(7,0) - (7,1) = (0,-1), ", ""),
        good.replace("Step 1: Extract spatial relations", "Stage one"),
        good.replace("Step 2", "Part 2"),
        zh.replace("方向 = 南", "方向 = 上"),
        zh.replace("因此，使用者面向西。", ""),
        zh.replace("步驟3：推論使用者朝向", "推論使用者朝向"),
    ]


@pytest.mark.criterion(7, "parser round-trip on every instance in both lexicons; 20 malformed variants rejected")
def test_criterion_7_parser():
    instances, _ = default_dataset()
    start = time.perf_counter()
    for lang in ("zh-TW", "en"):
        lex = shipped_lexicon(lang)
        for inst in instances:
            env = shipped_environment(inst.env_id)
            trace, text = render_gold_trace(inst, lex, env)
            assert parse_trace(text, lex, env) == trace, inst.id
    variants = _malformed_variants()
    assert len(variants) == 20
    for text in variants:
        with pytest.raises(FormatError):
            parse_trace(text, env=shipped_environment("gongguan"))
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion(8, "word-order/synonym variants keep the cue set; ambiguity variants score via coordinates")
def test_criterion_8_robustness():
    instances, _ = default_dataset()
    start = time.perf_counter()
    files = dataset_files(instances)
    checked = 0
    for inst in instances:
        if inst.variation not in ("word_order", "synonym"):
            continue
        env = shipped_environment(inst.env_id)
        got = Counter(c.pair for c in extract_relations(inst.utterance, shipped_lexicon(inst.language), env))
        assert got == Counter((r, lid) for r, lid, _ in inst.cues), inst.id
        checked += 1
    assert checked == 400
    # fresh variants of every test instance, in both languages
    for lang in ("zh-TW", "en"):
        lex = shipped_lexicon(lang)
        for inst in files["test"]:
            env = shipped_environment(inst.env_id)
            cues = [(r, lid) for r, lid, _ in inst.cues]
            for kind in ("word_order", "synonym"):
                v = build_instance(env, inst.anchor_landmark_id, cues, lexicon=lex, variation=kind, seed=inst.seed)
                got = Counter(c.pair for c in extract_relations(v.utterance, lex, env))
                assert got == Counter(cues), (inst.id, kind, v.utterance)
    amb = files["ambiguity"]
    outputs = {i.id: render_gold_trace(i, shipped_lexicon(i.language))[1] for i in amb}
    report = evaluate(amb, outputs)
    assert report.accuracy == 1.0 and report.format_error_rate == 0.0
    assert {i.variation for i in amb} == {"referential_ambiguity", "incomplete", "underspecified"}
    assert time.perf_counter() - start < 30.0


@pytest.mark.criterion(9, "baseline prompts B1-B4 byte-exact")
def test_criterion_9_prompts():
    start = time.perf_counter()
    env = shipped_environment("gongguan")
    inst = build_instance(env, "Gongguan_MRT_Exit_3", [(R.RIGHT, "Dormitory_2")], lexicon=shipped_lexicon("en"))
    assert emit_baseline_prompt(inst, "B1") == fixture_text("b1_expected.txt").rstrip("\n")
    m = inst.multimodal_input
    for protocol, name in (("B2", "b2_template.txt"), ("B3", "b3_template.txt"), ("B4", "b4_template.txt")):
        expected = fixture_text(name).rstrip("\n").replace("{user_input}", m)
        assert emit_baseline_prompt(inst, protocol) == expected, protocol
    b2 = emit_baseline_prompt(inst, "B2")
    for exemplar in ("gym(4,6), pharmacy(4,7)", "park(0,0), water_park(0,1)",
                     "foundation(0,7), high_school(0,6)", "cooperative_store(8,8), theater(8,7)"):
        assert exemplar in b2
    assert time.perf_counter() - start < 1.0
