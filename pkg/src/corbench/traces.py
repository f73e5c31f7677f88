"""Three-step reasoning traces: structure, rendering, tolerant parsing, scoring.

A trace has three steps (relation extraction, absolute directions, facing
inference) followed by a final answer.  Parsing accepts either shipped
lexicon's wording plus the looser layouts seen in model outputs (numbered or
bulleted headers, one field per line, a separate "Final Answer" section).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .grid import Coord, GridEnvironment, resolve_environment
from .noise import SEVERITY_LABELS
from .oracle import CardinalDirection, Relation, infer_facing
from .utterance import Lexicon, Unresolved, _norm, name_index, shipped_lexicon, SHIPPED_LEXICONS

TAXONOMY = ("direction_understanding", "relation_extraction", "asr_misrecognition")

LandmarkRef = str | Unresolved


class FormatError(ValueError):
    """Output text does not follow the three-step schema."""

    def __init__(self, message: str, span: str = ""):
        self.span = span
        super().__init__(f"{message}: {span!r}" if span else message)


@dataclass(frozen=True)
class Step1Entry:
    relation: Relation
    mention: str
    landmark: LandmarkRef


@dataclass(frozen=True)
class Step2Entry:
    mention: str
    landmark: LandmarkRef
    frm: Coord
    to: Coord
    vector: Coord
    direction: CardinalDirection


@dataclass(frozen=True)
class Step3Entry:
    mention: str
    landmark: LandmarkRef
    direction: CardinalDirection
    relation: Relation
    facing: CardinalDirection


@dataclass(frozen=True)
class ReasoningTrace:
    step1: tuple[Step1Entry, ...]
    step2: tuple[Step2Entry, ...]
    step3: tuple[Step3Entry, ...]
    final_answer: CardinalDirection

    def to_dict(self) -> dict[str, Any]:
        def lm(x: LandmarkRef) -> Any:
            return {"unresolved": x.text} if isinstance(x, Unresolved) else x

        return {
            "step1": [{"relation": e.relation.value, "mention": e.mention, "landmark": lm(e.landmark)} for e in self.step1],
            "step2": [
                {
                    "mention": e.mention,
                    "landmark": lm(e.landmark),
                    "from": list(e.frm),
                    "to": list(e.to),
                    "vector": list(e.vector),
                    "direction": e.direction.value,
                }
                for e in self.step2
            ],
            "step3": [
                {
                    "mention": e.mention,
                    "landmark": lm(e.landmark),
                    "direction": e.direction.value,
                    "relation": e.relation.value,
                    "facing": e.facing.value,
                }
                for e in self.step3
            ],
            "final_answer": self.final_answer.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ReasoningTrace:
        def lm(x: Any) -> LandmarkRef:
            return Unresolved(x["unresolved"]) if isinstance(x, dict) else x

        return cls(
            tuple(Step1Entry(Relation(e["relation"]), e["mention"], lm(e["landmark"])) for e in d["step1"]),
            tuple(
                Step2Entry(
                    e["mention"],
                    lm(e["landmark"]),
                    Coord(*e["from"]),
                    Coord(*e["to"]),
                    Coord(*e["vector"]),
                    CardinalDirection(e["direction"]),
                )
                for e in d["step2"]
            ),
            tuple(
                Step3Entry(
                    e["mention"],
                    lm(e["landmark"]),
                    CardinalDirection(e["direction"]),
                    Relation(e["relation"]),
                    CardinalDirection(e["facing"]),
                )
                for e in d["step3"]
            ),
            CardinalDirection(d["final_answer"]),
        )


# ---------------------------------------------------------------------------
# rendering


def render_trace(trace: ReasoningTrace, lex: Lexicon) -> str:
    t = lex.trace
    rel_word = {Relation(k): v for k, v in t["relation_words"].items()}
    dir_word = {CardinalDirection(k): v for k, v in t["direction_words"].items()}
    phrase = {Relation(k): v for k, v in t["relation_phrases"].items()}
    lines = [t["step1_header"]]
    for i, e in enumerate(trace.step1, 1):
        lines.append(t["step1_line"].format(i=i, relation=rel_word[e.relation], landmark=e.mention))
    lines.append(t["step2_header"])
    for i, e in enumerate(trace.step2, 1):
        lines.append(
            t["step2_line"].format(
                i=i, landmark=e.mention, to=e.to, frm=e.frm, vector=e.vector, direction=dir_word[e.direction]
            )
        )
    lines.append(t["step3_header"])
    for e in trace.step3:
        lines.append(
            t["step3_line"].format(
                landmark=e.mention,
                direction=dir_word[e.direction],
                phrase=phrase[e.relation],
                relation=rel_word[e.relation],
                facing=dir_word[e.facing],
            )
        )
    lines.append(t["conclusion"].format(facing=dir_word[trace.final_answer]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parsing

_DIRECTION_TOKENS: dict[str, CardinalDirection] = {}
for _d in CardinalDirection:
    _DIRECTION_TOKENS[_d.value.lower()] = _d
    _DIRECTION_TOKENS[_d.value[0].lower()] = _d
_DIRECTION_TOKENS.update(
    {"北": CardinalDirection.NORTH, "東": CardinalDirection.EAST, "南": CardinalDirection.SOUTH, "西": CardinalDirection.WEST}
)
_DIRECTION_TOKENS.update({k + "方": v for k, v in list(_DIRECTION_TOKENS.items()) if len(k) == 1 and not k.isascii()})
_DIRECTION_TOKENS.update({k + "邊": v for k, v in list(_DIRECTION_TOKENS.items()) if len(k) == 1 and not k.isascii()})


def _relation_tokens() -> dict[str, Relation]:
    out = {r.value: r for r in Relation}
    out["behind"] = Relation.BACK
    out.update({"前": Relation.FRONT, "後": Relation.BACK, "左": Relation.LEFT, "右": Relation.RIGHT})
    for lang in SHIPPED_LEXICONS:
        for k, v in shipped_lexicon(lang).trace["relation_words"].items():
            out[v.casefold()] = Relation(k)
    return out


_RELATION_TOKENS = _relation_tokens()

_FULLWIDTH = str.maketrans({"：": ":", "，": ",", "＝": "=", "（": "(", "）": ")", "－": "-", "。": ".", "「": '"', "」": '"', "“": '"', "”": '"'})
_HEADER = re.compile(r"^\s*(?:step|步驟)\s*([1-3])(?!\d)", re.I)
_FINAL = re.compile(r"^\s*(?:final\s+answer|最終答案)\s*[.:]?\s*", re.I)
_REL_FIELD = re.compile(r"(?:spatial\s+relation|空間關係)\s*\d*\s*=\s*([^,\n]+)", re.I)
_LM_FIELD = re.compile(r"(?:(?:reference\s+)?landmark|參考地標|地標)\s*\d*\s*=\s*([^,\n]+)", re.I)
_VECTOR = re.compile(
    r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*-\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*=\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)"
)
_DIR_FIELD = re.compile(r"(?:direction|方向)\s*=\s*([^,\n]+)", re.I)
_FROM_TO = re.compile(r"(?:from\s+(.+?)\s+to\s+(.+?)|從(.+?)到(.+?))\s*:", re.I)
_IS_TO = re.compile(r'(?:^|(?<=[.\n]))\s*([^.\n"]+?)\s+is\s+to\s+the\s+(\w+)', re.I)
_IS_TO_ZH = re.compile(r"(?:^|(?<=[.\n]))\s*([^.\n\"]+?)位於(\S)方")
_MAPPING = re.compile(r"indicates?\s+(\S+)\s*=\s*(\w+)\s+when\s+the\s+user\s+is\s+facing\s+(\w+)", re.I)
_MAPPING_ZH = re.compile(r"當使用者面向(\S)時\s*,\s*(\S+?)\s*=\s*(\S)")
# "when the user is facing X" and "當使用者面向X時" belong to mapping rules
_CONCLUSION = re.compile(r"(?:(?<!when )the\s+user\s+is\s+facing\s+([^\s.,]+)|(?<!當)使用者面向([^\s.,時]+)(?!時))", re.I)


def _normalize(text: str) -> str:
    text = text.translate(_FULLWIDTH).replace("``", '"').replace("''", '"')
    text = re.sub(r"\\textbf\{([^}]*)\}", r"\1", text)
    text = text.replace("\\item", "").replace("\\quad", " ").replace("\\\\", "\n")
    lines = []
    for line in text.splitlines():
        line = line.replace("**", "").replace("__", "")
        line = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s+", "", line)
        lines.append(line.strip())
    return "\n".join(lines)


def parse_direction(token: str) -> CardinalDirection:
    key = token.strip().strip(".。!\"'").casefold()
    if key.startswith("the "):
        key = key[4:]
    try:
        return _DIRECTION_TOKENS[key]
    except KeyError:
        raise FormatError("direction outside {North, East, South, West}", token) from None


def _parse_relation(token: str) -> Relation:
    key = token.strip().strip(".。\"'").casefold()
    try:
        return _RELATION_TOKENS[key]
    except KeyError:
        raise FormatError("unknown spatial relation", token) from None


def _sections(text: str) -> tuple[dict[int, str], str | None]:
    steps: dict[int, list[str]] = {}
    final: list[str] | None = None
    current: list[str] | None = None
    for line in text.splitlines():
        m = _HEADER.match(line)
        if m:
            n = int(m.group(1))
            current = steps.setdefault(n, []) if n not in steps else []
            current.append(line[m.end():].lstrip(":. "))
            continue
        m = _FINAL.match(line)
        if m:
            final = current = [line[m.end():]]
            continue
        if current is not None:
            current.append(line)
    return {k: "\n".join(v) for k, v in steps.items()}, ("\n".join(final) if final is not None else None)


class _Resolver:
    def __init__(self, env: GridEnvironment | None, lex: Lexicon | None):
        self.indexes = []
        if env is not None:
            lexes = [lex] if lex else [shipped_lexicon(l) for l in SHIPPED_LEXICONS]
            self.indexes = [name_index(env, l) for l in lexes]

    def __call__(self, mention: str) -> LandmarkRef:
        mention = mention.strip().strip("\"'")
        for idx in self.indexes:
            hit = idx.resolve(mention)
            if hit:
                return hit
        return Unresolved(mention)


def _step1(body: str, resolve: _Resolver) -> tuple[Step1Entry, ...]:
    tokens = sorted(
        [(m.start(), "rel", m.group(1)) for m in _REL_FIELD.finditer(body)]
        + [(m.start(), "lm", m.group(1)) for m in _LM_FIELD.finditer(body)]
    )
    out = []
    pending: Relation | None = None
    for _, kind, value in tokens:
        if kind == "rel":
            if pending is not None:
                raise FormatError("spatial relation without a landmark", value)
            pending = _parse_relation(value)
        else:
            if pending is None:
                raise FormatError("landmark without a spatial relation", value)
            mention = value.strip().rstrip(".")
            out.append(Step1Entry(pending, mention, resolve(mention)))
            pending = None
    if pending is not None:
        raise FormatError("spatial relation without a landmark", pending.value)
    if not out:
        raise FormatError("step 1 lists no spatial relations", body[:80])
    return tuple(out)


def _step2(body: str, resolve: _Resolver) -> tuple[Step2Entry, ...]:
    tokens = sorted(
        [(m.start(), "lm", m.group(1).strip()) for m in _LM_FIELD.finditer(body)]
        + [(m.start(), "ft", (m.group(2) or m.group(4)).strip()) for m in _FROM_TO.finditer(body)]
        + [(m.start(), "vec", m) for m in _VECTOR.finditer(body)]
        + [(m.start(), "dir", m.group(1)) for m in _DIR_FIELD.finditer(body)]
    )
    out = []
    cur: dict[str, Any] = {}

    def flush() -> None:
        if not cur:
            return
        if "vec" not in cur or "dir" not in cur:
            raise FormatError("step 2 entry lacks a vector or a direction", cur.get("mention", ""))
        v = cur["vec"]
        to, frm, vec = (Coord(int(v.group(i)), int(v.group(i + 1))) for i in (1, 3, 5))
        mention = cur.get("mention", "")
        out.append(Step2Entry(mention, resolve(mention) if mention else Unresolved(""), frm, to, vec, cur["dir"]))
        cur.clear()

    for _, kind, value in tokens:
        if kind in ("lm", "ft"):
            if "mention" in cur and kind == "ft":
                continue  # "Reference landmark = X, Direction vector from A to X:"
            if cur:
                flush()
            cur["mention"] = value.rstrip(".")
        elif kind == "vec":
            if "vec" in cur:
                flush()
            cur["vec"] = value
        else:
            cur["dir"] = parse_direction(value)
            if "vec" in cur:
                flush()
    flush()
    if not out:
        raise FormatError("step 2 lists no direction vectors", body[:80])
    return tuple(out)


def _step3(body: str, resolve: _Resolver) -> tuple[Step3Entry, ...]:
    places = sorted(
        [(m.start(), m.group(1), m.group(2)) for m in _IS_TO.finditer(body)]
        + [(m.start(), m.group(1), m.group(2)) for m in _IS_TO_ZH.finditer(body)]
    )
    rules = sorted(
        [(m.start(), m.group(1), m.group(2), m.group(3)) for m in _MAPPING.finditer(body)]
        + [(m.start(), m.group(2), m.group(3), m.group(1)) for m in _MAPPING_ZH.finditer(body)]
    )
    if not rules:
        raise FormatError("step 3 states no mapping rule", body[:80])
    if len(places) != len(rules):
        raise FormatError("step 3 mapping sentences and landmark placements do not pair up", body[:80])
    out = []
    for (_, mention, place_dir), (_, rel, rule_dir, facing) in zip(places, rules):
        direction = parse_direction(place_dir)
        if parse_direction(rule_dir) is not direction:
            raise FormatError("step 3 restates a different direction", f"{place_dir} / {rule_dir}")
        mention = mention.strip()
        out.append(Step3Entry(mention, resolve(mention), direction, _parse_relation(rel), parse_direction(facing)))
    return tuple(out)


def parse_trace(text: str, lexicon: Lexicon | None = None, env: GridEnvironment | None = None) -> ReasoningTrace:
    """Structured view of a model's trace.

    With `env`, landmark mentions are resolved to ids; anything that does not
    name a landmark comes back :class:`Unresolved`.
    """
    norm = _normalize(text)
    steps, final = _sections(norm)
    for n in (1, 2, 3):
        if n not in steps:
            raise FormatError(f"missing step {n}", norm[:80])
    resolve = _Resolver(env, lexicon)
    s1 = _step1(steps[1], resolve)
    s2 = _step2(steps[2], resolve)
    s3 = _step3(steps[3], resolve)
    if final is not None:
        m = _CONCLUSION.search(final)
        answer = parse_direction((m.group(1) or m.group(2)) if m else final.strip().split("\n")[0])
    else:
        hits = list(_CONCLUSION.finditer(steps[3]))
        if not hits:
            raise FormatError("missing final answer", steps[3][-80:])
        answer = parse_direction(hits[-1].group(1) or hits[-1].group(2))
    return ReasoningTrace(s1, s2, s3, answer)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class InstanceScore:
    instance_id: str
    parse_ok: bool
    correct: bool
    step_matches: tuple[bool, bool, bool] = (False, False, False)
    taxonomy: frozenset[str] = frozenset()
    error: str = ""

    @property
    def reasoning_quality(self) -> float:
        return sum(self.step_matches) / 3 if self.parse_ok else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "parse_ok": self.parse_ok,
            "correct": self.correct,
            "step_matches": list(self.step_matches),
            "reasoning_quality": round(self.reasoning_quality, 6),
            "taxonomy": sorted(self.taxonomy),
            "error": self.error,
        }


def _gold_pairs(gold) -> Counter:
    return Counter((Relation(r), lid) for r, lid, _ in gold.cues)


def _step_matches(gold, trace: ReasoningTrace) -> tuple[bool, bool, bool]:
    step1 = Counter((e.relation, e.landmark) for e in trace.step1) == _gold_pairs(gold)
    by_id: dict[str, set[CardinalDirection]] = {}
    for e in trace.step2:
        if isinstance(e.landmark, str):
            by_id.setdefault(e.landmark, set()).add(e.direction)
    step2 = all(CardinalDirection(d) in by_id.get(lid, ()) for _, lid, d in gold.cues)
    return step1, step2, _step3_ok(gold, trace)


def _step3_ok(gold, trace: ReasoningTrace) -> bool:
    if trace.final_answer is not CardinalDirection(gold.facing):
        return False
    stated = {e.landmark: e.direction for e in trace.step2 if isinstance(e.landmark, str)}
    for e in trace.step1:
        d = stated.get(e.landmark) if isinstance(e.landmark, str) else None
        if d is not None and infer_facing(d, e.relation) is not trace.final_answer:
            return False
    return all(infer_facing(e.direction, e.relation) is e.facing is trace.final_answer for e in trace.step3)


def corrupted_landmarks(gold, env: GridEnvironment, utterance: str, transcript: str) -> set[str]:
    """Cue/anchor landmarks whose surface name did not survive transcription."""
    out = set()
    ids = {gold.anchor_landmark_id, *(lid for _, lid, _ in gold.cues)}
    for lid in ids:
        for name in sorted(env.landmark(lid).names.values(), key=len, reverse=True):
            if name in utterance:
                if name not in transcript:
                    out.add(lid)
                break
    return out


def classify_taxonomy(
    gold,
    trace: ReasoningTrace,
    clean_utterance: str,
    transcript: str,
    env: GridEnvironment | None = None,
) -> frozenset[str]:
    """Residual-error labels for an incorrect, parseable output (may overlap)."""
    env = env or resolve_environment(gold.env_id)
    corrupted = corrupted_landmarks(gold, env, clean_utterance, transcript)
    gold_pairs = _gold_pairs(gold)
    got = Counter((e.relation, e.landmark) for e in trace.step1)
    resolved = {e.landmark for e in trace.step1 if isinstance(e.landmark, str)}
    any_unresolved = any(isinstance(e.landmark, Unresolved) for e in trace.step1)
    labels = set()
    relation_err = asr_err = False

    for rel, lid in (gold_pairs - got):
        if lid in resolved:
            relation_err = True
        elif lid in corrupted or (any_unresolved and corrupted):
            asr_err = True
        else:
            relation_err = True
    for rel, lm in (got - gold_pairs):
        if isinstance(lm, Unresolved):
            if corrupted:
                asr_err = True
            else:
                relation_err = True
        elif lm not in {lid for _, lid in gold_pairs}:
            relation_err = True

    step1, step2, step3 = _step_matches(gold, trace)
    by_id: dict[str, set[CardinalDirection]] = {}
    for e in trace.step2:
        if isinstance(e.landmark, str):
            by_id.setdefault(e.landmark, set()).add(e.direction)
    wrong2 = {lid for _, lid, d in gold.cues if CardinalDirection(d) not in by_id.get(lid, ())}
    if wrong2 & corrupted:
        asr_err = True
    if step1 and (not step3 or trace.final_answer is not CardinalDirection(gold.facing) or wrong2 - corrupted):
        labels.add("direction_understanding")
    if relation_err:
        labels.add("relation_extraction")
    if asr_err:
        labels.add("asr_misrecognition")
    return frozenset(labels)


def score_instance(
    gold,
    output_text: str | None,
    env: GridEnvironment | None = None,
    lexicon: Lexicon | None = None,
) -> InstanceScore:
    """Score one output against its gold instance; parse failures fold in."""
    if output_text is None:
        return InstanceScore(gold.id, False, False, error="no output")
    env = env or resolve_environment(gold.env_id)
    try:
        trace = parse_trace(output_text, lexicon, env)
    except FormatError as exc:
        return InstanceScore(gold.id, False, False, error=str(exc))
    matches = _step_matches(gold, trace)
    correct = trace.final_answer is CardinalDirection(gold.facing)
    taxonomy = frozenset() if correct else classify_taxonomy(gold, trace, gold.utterance, gold.transcript, env)
    return InstanceScore(gold.id, True, correct, matches, taxonomy)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class EvaluationReport:
    total: int
    accuracy: float
    format_error_rate: float
    mean_reasoning_quality: float
    taxonomy_counts: dict[str, int]
    exclusive_taxonomy_counts: dict[str, int]
    severity_accuracy: dict[str, tuple[int, int]]
    scores: tuple[InstanceScore, ...] = field(repr=False, default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "accuracy": self.accuracy,
            "format_error_rate": self.format_error_rate,
            "mean_reasoning_quality": self.mean_reasoning_quality,
            "taxonomy_counts": self.taxonomy_counts,
            "exclusive_taxonomy_counts": self.exclusive_taxonomy_counts,
            "severity_accuracy": {
                k: {"correct": c, "total": n, "accuracy": c / n if n else None} for k, (c, n) in self.severity_accuracy.items()
            },
            "scores": [s.to_dict() for s in self.scores],
        }

    def format_table(self) -> str:
        lines = [
            f"instances            {self.total}",
            f"accuracy             {100 * self.accuracy:.1f}%",
            f"format errors        {100 * self.format_error_rate:.1f}%",
            f"reasoning quality    {self.mean_reasoning_quality:.3f}",
            "",
            "taxonomy             overlapping  exclusive",
        ]
        for k in (*TAXONOMY, "multiple"):
            over = self.taxonomy_counts.get(k, "-") if k != "multiple" else "-"
            lines.append(f"  {k:<22}{over!s:>9}{self.exclusive_taxonomy_counts.get(k, 0):>11}")
        lines += ["", "severity             correct / total   accuracy"]
        for k, (c, n) in self.severity_accuracy.items():
            acc = f"{100 * c / n:.1f}%" if n else "-"
            lines.append(f"  {k:<18}{c:>7} / {n:<7}{acc:>10}")
        return "\n".join(lines)


def aggregate(scores: Sequence[InstanceScore], instances: Sequence) -> EvaluationReport:
    if len(scores) != len(instances):
        raise ValueError(f"{len(scores)} scores for {len(instances)} instances")
    if not scores:
        raise ValueError("cannot aggregate an empty evaluation")
    n = len(scores)
    overlapping = {k: 0 for k in TAXONOMY}
    exclusive = {k: 0 for k in (*TAXONOMY, "multiple")}
    for s in scores:
        for k in s.taxonomy:
            overlapping[k] += 1
        if len(s.taxonomy) == 1:
            exclusive[next(iter(s.taxonomy))] += 1
        elif s.taxonomy:
            exclusive["multiple"] += 1
    strata: dict[str, list[int]] = {k: [0, 0] for k in SEVERITY_LABELS}
    for s, inst in zip(scores, instances):
        cell = strata.setdefault(getattr(inst, "severity", "") or "unknown", [0, 0])
        cell[0] += s.correct
        cell[1] += 1
    return EvaluationReport(
        total=n,
        accuracy=sum(s.correct for s in scores) / n,
        format_error_rate=sum(not s.parse_ok for s in scores) / n,
        mean_reasoning_quality=sum(s.reasoning_quality for s in scores) / n,
        taxonomy_counts=overlapping,
        exclusive_taxonomy_counts=exclusive,
        severity_accuracy={k: (c, t) for k, (c, t) in strata.items()},
        scores=tuple(scores),
    )


def evaluate(instances: Sequence, outputs: Mapping[str, str], env_cache: dict | None = None) -> EvaluationReport:
    """Score every instance; instances without an output count as format errors."""
    envs = env_cache if env_cache is not None else {}
    scores = []
    for inst in instances:
        env = envs.get(inst.env_id)
        if env is None:
            env = envs[inst.env_id] = resolve_environment(inst.env_id)
        scores.append(score_instance(inst, outputs.get(inst.id), env))
    return aggregate(scores, instances)
