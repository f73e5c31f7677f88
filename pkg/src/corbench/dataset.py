"""Benchmark instance generation, serialization and derived record files.

The generator works in three passes: draw (site, cue subset) pairs for every
relation combination, render and split them, then corrupt the evaluation
transcripts against a severity mixture.  Every random choice comes from a
named sub-stream of the plan seed.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .grid import Coord, GridEnvironment, Landmark, neighbors, shipped_environment
from .noise import (
    CROSS_DOMAIN_COUNTS,
    DEFAULT_THRESHOLDS,
    MAIN_SET_COUNTS,
    CorruptionConfig,
    SeverityThresholds,
    allocate,
    assign_severity_targets,
    cer,
    classify_severity,
    corrupt,
)
from .oracle import (
    RELATION_ORDER,
    CardinalDirection,
    Cue,
    OrientationProblem,
    Relation,
    abs_dir,
    delta,
    infer_facing,
    landmark_dir,
    solve,
)
from .rng import substream
from .traces import ReasoningTrace, Step1Entry, Step2Entry, Step3Entry, render_trace
from .utterance import (
    AMBIGUITY_KINDS,
    Lexicon,
    UtteranceSpec,
    extract_relations,
    render,
    shipped_lexicon,
)

SPLITS = ("train", "validation", "test")
SUBSETS = ("main", "cross_domain", "linguistic_variation", "referential_ambiguity")
STAGES = ("S1", "S2", "S3", "S4")
PROTOCOLS = ("B1", "B2", "B3", "B4")

COMBINATIONS: tuple[tuple[Relation, ...], ...] = tuple(
    combo for k in range(1, 5) for combo in combinations(RELATION_ORDER, k)
)


def combo_key(relations: Iterable[Relation]) -> str:
    rels = set(Relation(r) for r in relations)
    return "+".join(r.value for r in RELATION_ORDER if r in rels)


COMBINATION_KEYS = tuple(combo_key(c) for c in COMBINATIONS)


class UnsatisfiablePlan(ValueError):
    pass


class InvariantViolation(RuntimeError):
    """A generated instance failed its own consistency checks."""


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# instances


@dataclass(frozen=True)
class Instance:
    id: str
    env_id: str
    anchor_landmark_id: str
    user_pos: Coord
    facing: CardinalDirection
    cues: tuple[tuple[Relation, str, CardinalDirection], ...]
    utterance: str
    transcript: str
    coords_block: str
    multimodal_input: str
    gold_trace: ReasoningTrace
    split: str
    subset: str
    severity: str
    language: str
    seed: int
    variation: str = "none"
    code_switched: bool = False
    cer: float = 0.0

    def problem(self, env: GridEnvironment) -> OrientationProblem:
        return OrientationProblem(
            self.user_pos, tuple(Cue(r, lid, env.position(lid)) for r, lid, _ in self.cues)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "env_id": self.env_id,
            "anchor_landmark_id": self.anchor_landmark_id,
            "user_pos": list(self.user_pos),
            "facing": self.facing.value,
            "cues": [{"relation": r.value, "landmark_id": lid, "abs_dir": d.value} for r, lid, d in self.cues],
            "utterance": self.utterance,
            "transcript": self.transcript,
            "coords_block": self.coords_block,
            "multimodal_input": self.multimodal_input,
            "gold_trace": self.gold_trace.to_dict(),
            "split": self.split,
            "subset": self.subset,
            "severity": self.severity,
            "language": self.language,
            "seed": self.seed,
            "variation": self.variation,
            "code_switched": self.code_switched,
            "cer": round(self.cer, 6),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Instance:
        try:
            return cls(
                id=d["id"],
                env_id=d["env_id"],
                anchor_landmark_id=d["anchor_landmark_id"],
                user_pos=Coord(*d["user_pos"]),
                facing=CardinalDirection(d["facing"]),
                cues=tuple(
                    (Relation(c["relation"]), c["landmark_id"], CardinalDirection(c["abs_dir"])) for c in d["cues"]
                ),
                utterance=d["utterance"],
                transcript=d["transcript"],
                coords_block=d["coords_block"],
                multimodal_input=d["multimodal_input"],
                gold_trace=ReasoningTrace.from_dict(d["gold_trace"]),
                split=d["split"],
                subset=d["subset"],
                severity=d["severity"],
                language=d["language"],
                seed=d["seed"],
                variation=d.get("variation", "none"),
                code_switched=d.get("code_switched", False),
                cer=d.get("cer", 0.0),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"instance {d.get('id', '?')}: bad field {exc}") from None


def check_instance(inst: Instance, env: GridEnvironment) -> None:
    """Raise InvariantViolation unless `inst` is self-consistent."""
    rels = [r for r, _, _ in inst.cues]
    if not 1 <= len(rels) <= 4 or len(set(rels)) != len(rels):
        raise InvariantViolation(f"{inst.id}: cue relations must be 1-4 distinct, got {rels}")
    try:
        facing = solve(inst.problem(env))
    except ValueError as exc:
        raise InvariantViolation(f"{inst.id}: {exc}") from None
    if facing is not inst.facing:
        raise InvariantViolation(f"{inst.id}: oracle says {facing.value}, instance says {inst.facing.value}")
    for r, lid, d in inst.cues:
        if abs_dir(delta(inst.user_pos, env.position(lid))) is not d:
            raise InvariantViolation(f"{inst.id}: stored direction of {lid} is wrong")
    m, _ = serialize_multimodal(inst.transcript, _coords(inst, env))
    if m != inst.multimodal_input:
        raise InvariantViolation(f"{inst.id}: multimodal input does not match its parts")


def _coords(inst: Instance, env: GridEnvironment) -> list[tuple[str, Coord]]:
    return [(inst.anchor_landmark_id, inst.user_pos)] + [(lid, env.position(lid)) for _, lid, _ in inst.cues]


# ---------------------------------------------------------------------------
# serialization of the model input

_COORD_ENTRY = re.compile(r"\s*([^\s,()]+)\((-?\d+),(-?\d+)\)\s*")


def serialize_multimodal(transcript: str, coords: Sequence[tuple[str, Coord]]) -> tuple[str, str]:
    """(M, T): the single-string model input and its coordinate block."""
    t = ", ".join(f"{lid}{Coord(*pos)}" for lid, pos in coords)
    return f"Audio: {transcript} | Coordinates: {t}", t


def parse_coords(block: str) -> dict[str, Coord]:
    out: dict[str, Coord] = {}
    for part in block.split(", ") if block else []:
        m = _COORD_ENTRY.fullmatch(part)
        if not m:
            raise DataError(f"bad coordinate entry {part!r}")
        out[m.group(1)] = Coord(int(m.group(2)), int(m.group(3)))
    return out


# ---------------------------------------------------------------------------
# sites


@dataclass(frozen=True)
class Site:
    anchor: Landmark
    facing: CardinalDirection
    relations: Mapping[Relation, Landmark]


def enumerate_sites(env: GridEnvironment) -> list[Site]:
    """Every (anchor, facing) with the relations its occupied neighbours realize."""
    sites = []
    for lm in env.landmarks:
        nb = neighbors(env, lm.position)
        for facing in CardinalDirection:
            rels = {q: nb[landmark_dir(facing, q)] for q in RELATION_ORDER if landmark_dir(facing, q) in nb}
            sites.append(Site(lm, facing, rels))
    return sites


# ---------------------------------------------------------------------------
# gold traces


def gold_trace(inst: Instance, lex: Lexicon, env: GridEnvironment | None = None) -> ReasoningTrace:
    env = env or shipped_environment(inst.env_id)
    s1, s2, s3 = [], [], []
    for rel, lid, d in inst.cues:
        name = env.landmark(lid).name(lex.language)
        to = env.position(lid)
        s1.append(Step1Entry(rel, name, lid))
        s2.append(Step2Entry(name, lid, inst.user_pos, to, delta(inst.user_pos, to), d))
        s3.append(Step3Entry(name, lid, d, rel, infer_facing(d, rel)))
    return ReasoningTrace(tuple(s1), tuple(s2), tuple(s3), inst.facing)


def explain(
    env: GridEnvironment, user_pos: Coord, cues: Sequence[tuple[Relation, str]], lex: Lexicon
) -> tuple[CardinalDirection, str]:
    """Solve a query and render the derivation in gold-trace form.

    Raises the oracle's errors (diagonal offset, disagreeing cues) unchanged.
    """
    user = Coord(*user_pos)
    problem = OrientationProblem(user, tuple(Cue(Relation(r), lid, env.position(lid)) for r, lid in cues))
    facing = solve(problem)
    here = env.at(user)
    inst = Instance(
        id="", env_id=env.id, anchor_landmark_id=here.id if here else "", user_pos=user, facing=facing,
        cues=tuple((c.relation, c.landmark_id, abs_dir(delta(user, c.landmark_pos))) for c in problem.cues),
        utterance="", transcript="", coords_block="", multimodal_input="", gold_trace=None,  # type: ignore[arg-type]
        split="test", subset="main", severity="perfect", language=lex.language, seed=0,
    )
    return facing, render_gold_trace(inst, lex, env)[1]


def render_gold_trace(inst: Instance, lex: Lexicon, env: GridEnvironment | None = None) -> tuple[ReasoningTrace, str]:
    trace = gold_trace(inst, lex, env)
    return trace, render_trace(trace, lex)


# ---------------------------------------------------------------------------
# building one instance


def build_instance(
    env: GridEnvironment,
    anchor_id: str,
    cues: Sequence[tuple[Relation, str]],
    *,
    lexicon: Lexicon | None = None,
    instance_id: str = "",
    variation: str = "none",
    code_switch: bool = False,
    transcript: str | None = None,
    split: str = "test",
    subset: str = "main",
    severity: str | None = None,
    seed: int = 0,
) -> Instance:
    """Render and validate a single instance (clean transcript unless given)."""
    lex = lexicon or shipped_lexicon("zh-TW")
    spec = UtteranceSpec(
        anchor_id,
        tuple((Relation(r), lid) for r, lid in cues),
        variation=variation,
        language=lex.language,
        seed=seed,
        code_switch_rate=1.0 if code_switch else 0.0,
    )
    rendering = render(spec, env, lex)
    user = env.position(anchor_id)
    ordered = tuple(
        (r, lid, abs_dir(delta(user, env.position(lid)))) for r, lid in rendering.cue_order
    )
    facings = {infer_facing(d, r) for r, _, d in ordered}
    if len(facings) != 1:
        raise InvariantViolation(f"cues around {anchor_id} disagree on the facing")
    text = rendering.text
    transcript = text if transcript is None else transcript
    coords = [(anchor_id, user)] + [(lid, env.position(lid)) for _, lid, _ in ordered]
    m, t = serialize_multimodal(transcript, coords)
    inst = Instance(
        id=instance_id,
        env_id=env.id,
        anchor_landmark_id=anchor_id,
        user_pos=user,
        facing=facings.pop(),
        cues=ordered,
        utterance=text,
        transcript=transcript,
        coords_block=t,
        multimodal_input=m,
        gold_trace=None,  # type: ignore[arg-type]
        split=split,
        subset=subset,
        severity=severity or classify_severity(text, transcript),
        language=lex.language,
        seed=seed,
        variation=variation,
        code_switched=rendering.switched,
        cer=round(cer(text, transcript), 6),
    )
    inst = replace(inst, gold_trace=gold_trace(inst, lex, env))
    check_instance(inst, env)
    return inst


def with_transcript(inst: Instance, transcript: str, env: GridEnvironment, severity: str | None = None) -> Instance:
    m, _ = serialize_multimodal(transcript, _coords(inst, env))
    return replace(
        inst,
        transcript=transcript,
        multimodal_input=m,
        cer=round(cer(inst.utterance, transcript), 6),
        severity=severity or classify_severity(inst.utterance, transcript),
    )


# ---------------------------------------------------------------------------
# plans


def default_combination_counts(total: int = 4600, per_single: int = 320) -> dict[str, int]:
    """Singles fixed at `per_single`; the remainder spread evenly over the rest."""
    counts = {k: per_single for k in COMBINATION_KEYS[:4]}
    rest = COMBINATION_KEYS[4:]
    base, extra = divmod(total - 4 * per_single, len(rest))
    counts.update({k: base + (i < extra) for i, k in enumerate(rest)})
    return counts


@dataclass(frozen=True)
class GenerationPlan:
    combination_counts: Mapping[str, int] = field(default_factory=default_combination_counts)
    split_sizes: Mapping[str, int] = field(default_factory=lambda: {"train": 3216, "validation": 688, "test": 696})
    variation_count: int = 400
    variation_kinds: tuple[str, ...] = ("word_order", "synonym")
    cross_domain_count: int = 540
    ambiguity_count: int = 200
    ambiguity_kinds: tuple[str, ...] = AMBIGUITY_KINDS
    main_env: str = "gongguan"
    cross_domain_env: str = "taipei_station"
    ambiguity_env: str = "gongguan"
    language_mix: Mapping[str, float] = field(default_factory=lambda: {"zh-TW": 1.0})
    code_switch_rate: float = 0.047
    cross_domain_code_switch_rate: float = 0.465
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    severity_mix: Mapping[str, float] = field(default_factory=lambda: dict(MAIN_SET_COUNTS))
    cross_domain_severity_mix: Mapping[str, float] = field(default_factory=lambda: dict(CROSS_DOMAIN_COUNTS))
    thresholds: SeverityThresholds = DEFAULT_THRESHOLDS
    seed: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.combination_counts) - set(COMBINATION_KEYS)
        if unknown:
            raise ValueError(f"unknown relation combinations: {sorted(unknown)}")
        if set(self.split_sizes) != set(SPLITS):
            raise ValueError(f"split sizes must name exactly {SPLITS}")
        counts = [*self.combination_counts.values(), *self.split_sizes.values(),
                  self.variation_count, self.cross_domain_count, self.ambiguity_count]
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        if sum(self.split_sizes.values()) != self.total:
            raise ValueError(
                f"split sizes sum to {sum(self.split_sizes.values())} but combinations give {self.total}"
            )
        if self.variation_count > self.total:
            raise ValueError("variation quota exceeds the main instance count")
        if self.variation_count and not self.variation_kinds:
            raise ValueError("variation quota needs at least one variation kind")
        if self.ambiguity_count and not self.ambiguity_kinds:
            raise ValueError("ambiguity quota needs at least one ambiguity kind")
        if not self.language_mix or any(w < 0 for w in self.language_mix.values()) or not sum(self.language_mix.values()):
            raise ValueError("language_mix needs a positive weight")

    @property
    def total(self) -> int:
        return sum(self.combination_counts.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "combination_counts": dict(self.combination_counts),
            "split_sizes": dict(self.split_sizes),
            "variation_count": self.variation_count,
            "variation_kinds": list(self.variation_kinds),
            "cross_domain_count": self.cross_domain_count,
            "ambiguity_count": self.ambiguity_count,
            "ambiguity_kinds": list(self.ambiguity_kinds),
            "main_env": self.main_env,
            "cross_domain_env": self.cross_domain_env,
            "ambiguity_env": self.ambiguity_env,
            "language_mix": dict(self.language_mix),
            "code_switch_rate": self.code_switch_rate,
            "cross_domain_code_switch_rate": self.cross_domain_code_switch_rate,
            "corruption": self.corruption.to_dict(),
            "severity_mix": dict(self.severity_mix),
            "cross_domain_severity_mix": dict(self.cross_domain_severity_mix),
            "thresholds": {"minor": self.thresholds.minor, "moderate": self.thresholds.moderate, "major": self.thresholds.major},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> GenerationPlan:
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown plan fields: {sorted(extra)}")
        kw = dict(raw)
        if "corruption" in kw and not isinstance(kw["corruption"], CorruptionConfig):
            kw["corruption"] = CorruptionConfig.from_dict(kw["corruption"])
        if "thresholds" in kw and not isinstance(kw["thresholds"], SeverityThresholds):
            kw["thresholds"] = SeverityThresholds(**kw["thresholds"])
        for k in ("variation_kinds", "ambiguity_kinds"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


# ---------------------------------------------------------------------------
# generation


@dataclass
class _Draft:
    env: GridEnvironment
    anchor: str
    cues: tuple[tuple[Relation, str], ...]
    split: str = "test"
    subset: str = "main"
    variation: str = "none"
    code_switch: bool = False
    language: str = "zh-TW"
    mix: str = "main"


def _draw(env: GridEnvironment, counts: Mapping[str, int], seed: int, stream: str) -> list[tuple[str, tuple]]:
    sites = enumerate_sites(env)
    out = []
    for combo, key in zip(COMBINATIONS, COMBINATION_KEYS):
        need = counts.get(key, 0)
        if not need:
            continue
        eligible = [s for s in sites if all(r in s.relations for r in combo)]
        if not eligible:
            raise UnsatisfiablePlan(f"environment {env.id} has no site realizing {key}")
        rng = substream(seed, stream, key)
        rng.shuffle(eligible)
        for i in range(need):
            site = eligible[i % len(eligible)]
            out.append((site.anchor.id, tuple((r, site.relations[r].id) for r in combo)))
    return out


def generate(
    plan: GenerationPlan | None = None,
    envs: Mapping[str, GridEnvironment] | None = None,
    lexicons: Mapping[str, Lexicon] | None = None,
) -> list[Instance]:
    """All instances of `plan`: main splits, then cross-domain, then ambiguity."""
    plan = plan or GenerationPlan()
    envs = dict(envs or {})
    for name in {plan.main_env, plan.cross_domain_env, plan.ambiguity_env}:
        if name not in envs:
            try:
                envs[name] = shipped_environment(name)
            except KeyError:
                raise UnsatisfiablePlan(f"no environment named {name!r}") from None
    lexicons = dict(lexicons or {})
    for lang in plan.language_mix:
        lexicons.setdefault(lang, shipped_lexicon(lang))
    seed = plan.seed
    langs = list(plan.language_mix)
    weights = [plan.language_mix[l] for l in langs]

    # main set: draw, shuffle, split
    main_env = envs[plan.main_env]
    raw = _draw(main_env, plan.combination_counts, seed, "main")
    substream(seed, "main-order").shuffle(raw)
    drafts: list[_Draft] = []
    cursor = 0
    for split in SPLITS:
        for anchor, cues in raw[cursor: cursor + plan.split_sizes[split]]:
            drafts.append(_Draft(main_env, anchor, cues, split=split))
        cursor += plan.split_sizes[split]
    var_quota = allocate(plan.variation_count, plan.split_sizes) if plan.variation_count else {}
    for split in SPLITS:
        idx = [i for i, d in enumerate(drafts) if d.split == split]
        picked = sorted(substream(seed, "variation-pick", split).sample(idx, var_quota.get(split, 0)))
        for j, i in enumerate(picked):
            drafts[i].subset = "linguistic_variation"
            drafts[i].variation = plan.variation_kinds[j % len(plan.variation_kinds)]
    rng = substream(seed, "main-switch")
    for d in drafts:
        d.code_switch = rng.random() < plan.code_switch_rate
        d.language = rng.choices(langs, weights)[0]

    # cross-domain set
    even = {k: 1 for k in COMBINATION_KEYS}
    xd_env = envs[plan.cross_domain_env]
    xd_raw = _draw(xd_env, allocate(plan.cross_domain_count, even) if plan.cross_domain_count else {}, seed, "cross")
    rng = substream(seed, "cross-switch")
    xd = []
    for anchor, cues in xd_raw:
        xd.append(_Draft(xd_env, anchor, cues, subset="cross_domain", code_switch=rng.random() < plan.cross_domain_code_switch_rate,
                         language=rng.choices(langs, weights)[0], mix="cross"))

    # referential-ambiguity set
    amb_env = envs[plan.ambiguity_env]
    amb_raw = _draw(amb_env, allocate(plan.ambiguity_count, even) if plan.ambiguity_count else {}, seed, "ambiguity")
    substream(seed, "ambiguity-order").shuffle(amb_raw)
    rng = substream(seed, "ambiguity-lang")
    amb = [
        _Draft(amb_env, anchor, cues, subset="referential_ambiguity",
               variation=plan.ambiguity_kinds[i % len(plan.ambiguity_kinds)], language=rng.choices(langs, weights)[0])
        for i, (anchor, cues) in enumerate(amb_raw)
    ]

    instances = []
    for prefix, group in (("main", drafts), ("xd", xd), ("amb", amb)):
        for n, d in enumerate(group, 1):
            iid = f"{prefix}-{n:05d}"
            inst_seed = substream(seed, "instance", iid).getrandbits(32)
            inst = build_instance(
                d.env, d.anchor, d.cues, lexicon=lexicons[d.language], instance_id=iid, variation=d.variation,
                code_switch=d.code_switch, split=d.split, subset=d.subset, seed=inst_seed,
            )
            if d.variation == "synonym" and inst.utterance == _canonical_text(d, lexicons, inst_seed):
                inst = build_instance(
                    d.env, d.anchor, d.cues, lexicon=lexicons[d.language], instance_id=iid, variation="word_order",
                    code_switch=d.code_switch, split=d.split, subset=d.subset, seed=inst_seed,
                )
            instances.append(inst)
    return _corrupt_evaluation(instances, plan, envs, lexicons)


def _canonical_text(d: _Draft, lexicons: Mapping[str, Lexicon], seed: int) -> str:
    return build_instance(d.env, d.anchor, d.cues, lexicon=lexicons[d.language], code_switch=d.code_switch, seed=seed).utterance


def _corrupt_evaluation(
    instances: list[Instance], plan: GenerationPlan, envs: Mapping[str, GridEnvironment], lexicons: Mapping[str, Lexicon]
) -> list[Instance]:
    groups: dict[str, list[int]] = {}
    for i, inst in enumerate(instances):
        if inst.split == "train":
            continue
        key = "cross_domain" if inst.subset == "cross_domain" else (
            "ambiguity" if inst.subset == "referential_ambiguity" else inst.split
        )
        groups.setdefault(key, []).append(i)
    out = list(instances)
    by_id = {e.id: e for e in envs.values()}
    for key, idx in groups.items():
        mix = plan.cross_domain_severity_mix if key == "cross_domain" else plan.severity_mix
        targets = assign_severity_targets(
            [len(instances[i].utterance) for i in idx], mix, substream(plan.seed, "severity", key), plan.thresholds
        )
        for i, (_, target) in zip(idx, targets):
            inst = instances[i]
            cfg = replace(plan.corruption, target_cer=target, seed=inst.seed)
            transcript, _ = corrupt(inst.utterance, cfg, lexicons[inst.language])
            out[i] = with_transcript(inst, transcript, by_id[inst.env_id], classify_severity(inst.utterance, transcript, plan.thresholds))
    return out


# ---------------------------------------------------------------------------
# stage records and baseline prompts


def emit_stage_records(
    instances: Iterable[Instance], stage: str, lexicon: Lexicon | None = None
) -> list[tuple[str, str]]:
    """(input, target) pairs for one curriculum stage; all inputs use clean text."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    records = []
    for inst in instances:
        lex = lexicon or shipped_lexicon(inst.language)
        t = lex.trace
        env = shipped_environment(inst.env_id)
        dir_word = {CardinalDirection(k): v for k, v in t["direction_words"].items()}
        rel_word = {Relation(k): v for k, v in t["relation_words"].items()}
        if stage == "S1":
            # extraction follows the utterance's language, the wording follows `lex`
            found = extract_relations(inst.utterance, shipped_lexicon(inst.language))
            lines = [
                t["step1_line"].format(i=i, relation=rel_word[c.relation], landmark=c.landmark.text)
                for i, c in enumerate(found, 1)
            ]
            records.append((f"{t['s1_task']}\n{inst.utterance}", "\n".join(lines)))
        elif stage == "S2":
            for _, lid, d in inst.cues:
                to = env.position(lid)
                records.append((
                    t["s2_input"].format(frm=inst.user_pos, to=to),
                    t["s2_target"].format(to=to, frm=inst.user_pos, vector=delta(inst.user_pos, to), direction=dir_word[d]),
                ))
        elif stage == "S3":
            for r, _, d in inst.cues:
                records.append((
                    t["s3_input"].format(direction=dir_word[d], relation=rel_word[r]),
                    t["s3_target"].format(
                        direction=dir_word[d], relation=rel_word[r], phrase=t["relation_phrases"][r.value],
                        facing=dir_word[infer_facing(d, r)],
                    ),
                ))
        else:
            m, _ = serialize_multimodal(inst.utterance, _coords(inst, env))
            records.append((m, render_gold_trace(inst, lex, env)[1]))
    return records


B1_TEMPLATE = (
    "Question: {M}\n"
    "Which direction is the user facing? Please answer North, South, East, or West.\n"
    "Answer:"
)

B2_TEMPLATE = (
    "Instruction: Based on the audio description and coordinate information, determine which direction the user is facing.\n"
    "\n"
    "Example: Audio: I am at the gym, and the pharmacy is in front of me | Coordinates: gym(4,6), pharmacy(4,7)\n"
    "Answer: North\n"
    "\n"
    "Example: Audio: I am at the park, and the water park is behind me | Coordinates: park(0,0), water_park(0,1)\n"
    "Answer: South\n"
    "\n"
    "Example: Audio: I am at the foundation, and the high school is on my right | Coordinates: foundation(0,7), high_school(0,6)\n"
    "Answer: East\n"
    "\n"
    "Example: Audio: I am at the cooperative store, and the theater is on my left | Coordinates: cooperative_store(8,8), theater(8,7)\n"
    "Answer: West\n"
    "\n"
    "Question: {M}\n"
    "Answer:"
)

_IND = "    "
B3_TEMPLATE = (
    "Instruction: Use three-step reasoning to determine the user's facing direction given the audio description and coordinates.\n"
    "\n"
    "Example 1\n"
    "Input: Audio: I am at the gym, and the pharmacy is in front of me | Coordinates: gym(4,6), pharmacy(4,7)\n"
    "Output:\n"
    "Step 1: Extract spatial relations\n"
    f"{_IND}Spatial relation = front\n"
    f"{_IND}Reference landmark = pharmacy\n"
    "Step 2: Calculate absolute directions\n"
    f"{_IND}Direction vector from gym to pharmacy: (4,7) - (4,6) = (0,1)\n"
    f"{_IND}Direction = North\n"
    "Step 3: Infer user orientation\n"
    f'{_IND}The pharmacy is to the North, and the user describes it as "in front of me."\n'
    f"{_IND}Spatial mapping rules indicate front = North when the user is facing North.\n"
    f"{_IND}Therefore, the user is facing North.\n"
    "\n"
    "Example 2\n"
    "Input: Audio: I am at the park, and the water park is behind me | Coordinates: park(0,0), water_park(0,1)\n"
    "Output:\n"
    "Step 1: Extract spatial relations\n"
    f"{_IND}Spatial relation = behind\n"
    f"{_IND}Reference landmark = water park\n"
    "Step 2: Calculate absolute directions\n"
    f"{_IND}Direction vector from park to water park: (0,1) - (0,0) = (0,1)\n"
    f"{_IND}Direction = North\n"
    "Step 3: Infer user orientation\n"
    f'{_IND}The water park is to the North, and the user describes it as "behind me."\n'
    f"{_IND}Spatial mapping rules indicate behind = North when the user is facing South.\n"
    f"{_IND}Therefore, the user is facing South.\n"
    "\n"
    "Now use the same three-step reasoning:\n"
    "Input: {M}\n"
    "Output:"
)

B4_TEMPLATE = "USER: {M}\nASSISTANT:"

BASELINE_TEMPLATES = {"B1": B1_TEMPLATE, "B2": B2_TEMPLATE, "B3": B3_TEMPLATE, "B4": B4_TEMPLATE}


def emit_baseline_prompt(inst: Instance | str, protocol: str) -> str:
    """Baseline prompt for `inst` (or a raw multimodal string)."""
    if protocol not in BASELINE_TEMPLATES:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    m = inst if isinstance(inst, str) else inst.multimodal_input
    return BASELINE_TEMPLATES[protocol].replace("{M}", m)


# ---------------------------------------------------------------------------
# line-delimited files


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dumps_jsonl(rows: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> None:
    atomic_write_text(path, dumps_jsonl(rows))


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise DataError(f"{path}:{n}: expected a JSON object")
            yield n, row


def read_instances(path: str | Path) -> list[Instance]:
    out = []
    for n, row in iter_jsonl(path):
        try:
            out.append(Instance.from_dict(row))
        except DataError as exc:
            raise DataError(f"{path}:{n}: {exc}") from None
    return out


def write_instances(path: str | Path, instances: Iterable[Instance]) -> None:
    write_jsonl(path, (i.to_dict() for i in instances))


def dataset_files(instances: Sequence[Instance]) -> dict[str, list[Instance]]:
    """Group instances into the per-split / per-subset output files."""
    files: dict[str, list[Instance]] = {"train": [], "validation": [], "test": [], "cross_domain": [], "ambiguity": []}
    for inst in instances:
        if inst.subset == "cross_domain":
            files["cross_domain"].append(inst)
        elif inst.subset == "referential_ambiguity":
            files["ambiguity"].append(inst)
        else:
            files[inst.split].append(inst)
    return files
