"""Shared helpers for the test suite: a cached default dataset and planted errors."""

from __future__ import annotations

import time
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

from corbench.dataset import Instance, generate, gold_trace, with_transcript
from corbench.grid import shipped_environment
from corbench.oracle import infer_facing
from corbench.traces import ReasoningTrace, corrupted_landmarks, render_trace
from corbench.utterance import Unresolved, shipped_lexicon

FIXTURES = Path(__file__).parent / "fixtures"


@lru_cache(maxsize=None)
def default_dataset() -> tuple[tuple[Instance, ...], float]:
    """The default-plan dataset and how long generating it took."""
    start = time.perf_counter()
    instances = tuple(generate())
    return instances, time.perf_counter() - start


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# planted errors


def flip_step3(inst: Instance) -> str:
    """Correct steps 1-2, wrong facing in step 3 and the final answer."""
    lex = shipped_lexicon(inst.language)
    g = gold_trace(inst, lex)
    wrong = g.final_answer.opposite()
    step3 = tuple(replace(e, facing=wrong) for e in g.step3)
    return render_trace(ReasoningTrace(g.step1, g.step2, step3, wrong), lex)


def swap_relations(inst: Instance) -> str:
    """Every relation replaced by its opposite, step 3 kept self-consistent."""
    lex = shipped_lexicon(inst.language)
    g = gold_trace(inst, lex)
    step1 = tuple(replace(e, relation=e.relation.opposite()) for e in g.step1)
    step3 = tuple(
        replace(e, relation=e.relation.opposite(), facing=infer_facing(e.direction, e.relation.opposite()))
        for e in g.step3
    )
    return render_trace(ReasoningTrace(step1, g.step2, step3, step3[0].facing), lex)


def confusable(inst: Instance) -> tuple[str, str, str] | None:
    """(landmark id, clean name, misrecognized name) for a cue whose name is intact
    in the transcript and has a confusion-table entry."""
    lex = shipped_lexicon(inst.language)
    env = shipped_environment(inst.env_id)
    for _, lid, _ in inst.cues:
        name = env.landmark(lid).name(inst.language)
        if name not in inst.transcript or inst.transcript.count(name) != 1:
            continue
        for key, subs in lex.confusion_table.items():
            if key in name:
                return lid, name, name.replace(key, subs[0])
    return None


def confuse_landmark(inst: Instance, swap_other: bool = False) -> tuple[Instance, str]:
    """Misrecognize one landmark in the transcript; the output then carries the
    misrecognized name through every step and lands on a wrong facing.

    With `swap_other`, the relation of one intact cue is also reversed, so the
    output shows both a relation error and an ASR error."""
    found = confusable(inst)
    assert found is not None
    lid, name, confused = found
    env = shipped_environment(inst.env_id)
    lex = shipped_lexicon(inst.language)
    noisy = with_transcript(inst, inst.transcript.replace(name, confused), env, inst.severity)
    g = gold_trace(noisy, lex)
    wrong = g.final_answer.opposite()
    other = next(l for _, l, _ in inst.cues if l != lid) if swap_other else None

    def swap(e):
        if e.landmark == lid:
            return replace(e, mention=confused, landmark=Unresolved(confused))
        if e.landmark == other and hasattr(e, "relation"):
            return replace(e, relation=e.relation.opposite())
        return e

    step1 = tuple(swap(e) for e in g.step1)
    step2 = tuple(swap(e) for e in g.step2)
    step3 = tuple(replace(swap(e), facing=wrong) for e in g.step3)
    return noisy, render_trace(ReasoningTrace(step1, step2, step3, wrong), lex)


def plant_errors(test: list[Instance], n_direction: int = 9, n_relation: int = 2, n_asr: int = 3):
    """Return (instances, outputs, planted ids by kind) for the test split.

    One instance carries both a relation swap and a landmark confusion, so the
    n_direction + n_relation + n_asr labels land on one fewer instance."""
    outputs = {}
    instances = list(test)
    planted = {"direction": [], "relation": [], "asr": []}
    overlap_done = n_relation == 0 or n_asr == 0
    for i, inst in enumerate(instances):
        env = shipped_environment(inst.env_id)
        lex = shipped_lexicon(inst.language)
        clean = not corrupted_landmarks(inst, env, inst.utterance, inst.transcript)
        found = confusable(inst) if clean else None
        if not overlap_done and found is not None and len(inst.cues) >= 2:
            instances[i], outputs[inst.id] = confuse_landmark(inst, swap_other=True)
            planted["asr"].append(inst.id)
            planted["relation"].append(inst.id)
            overlap_done = True
        elif len(planted["asr"]) < n_asr - (not overlap_done) and found is not None:
            instances[i], outputs[inst.id] = confuse_landmark(inst)
            planted["asr"].append(inst.id)
        elif len(planted["relation"]) < n_relation - (not overlap_done) and clean:
            outputs[inst.id] = swap_relations(inst)
            planted["relation"].append(inst.id)
        elif len(planted["direction"]) < n_direction:
            outputs[inst.id] = flip_step3(inst)
            planted["direction"].append(inst.id)
        else:
            outputs[inst.id] = render_trace(gold_trace(inst, lex), lex)
    return instances, outputs, planted
