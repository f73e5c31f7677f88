"""Lexicon-driven utterance rendering, robustness transforms and cue extraction.

Text is handled as opaque unicode.  All matching is longest-match over the
surface forms listed in a :class:`Lexicon`, so unspaced zh-TW and spaced
English go through the same code path.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .grid import GridEnvironment, _data_file
from .oracle import Relation
from .rng import substream

VARIATIONS = (
    "none",
    "word_order",
    "synonym",
    "referential_ambiguity",
    "incomplete",
    "underspecified",
)
MEANING_PRESERVING = ("none", "word_order", "synonym")
AMBIGUITY_KINDS = ("referential_ambiguity", "incomplete", "underspecified")

_SEPARATORS = re.compile(r"[,，、;；]")
_EDGE_PUNCT = " \t\n.。!！?？\"'“”「」"


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    language: str
    relation_phrases: Mapping[Relation, tuple[str, ...]]
    anchor_templates: tuple[str, ...]
    cue_templates: Mapping[Relation, tuple[str, ...]]
    synonym_table: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    confusion_table: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    filler_tokens: tuple[str, ...] = ()
    vague_references: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    uncertainty_markers: tuple[str, ...] = ()
    underspecified_references: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    short_relation_phrases: Mapping[Relation, str] = field(default_factory=dict)
    category_names: Mapping[str, str] = field(default_factory=dict)
    clause_separator: str = ", "
    final_conjunction: str = ""
    connectives: tuple[str, ...] = ()
    copulas: tuple[str, ...] = ()
    anchor_prefixes: tuple[str, ...] = ()
    trace: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for rel in Relation:
            if not self.relation_phrases.get(rel):
                raise LexiconError(f"{self.language}: no phrase for relation {rel.value}")
            if not self.cue_templates.get(rel):
                raise LexiconError(f"{self.language}: no cue template for relation {rel.value}")
        canon = [self.relation_phrases[r][0] for r in Relation]
        for a in canon:
            for b in canon:
                if a != b and a in b:
                    raise LexiconError(f"{self.language}: canonical phrases overlap: {a!r} in {b!r}")
        if not self.anchor_templates or "{anchor}" not in self.anchor_templates[0]:
            raise LexiconError(f"{self.language}: anchor template needs an {{anchor}} slot")

    @property
    def spaced(self) -> bool:
        return not self.language.split("-")[0] in ("zh", "ja")

    def canonical_phrase(self, rel: Relation) -> str:
        return self.relation_phrases[rel][0]

    @property
    def anchor_prefix(self) -> str:
        return self.anchor_templates[0].split("{anchor}")[0]

    def all_relation_phrases(self) -> dict[str, Relation]:
        out: dict[str, Relation] = {}
        for rel, phrases in self.relation_phrases.items():
            for p in phrases:
                out.setdefault(p, rel)
        return out


def _rel_map(raw: Mapping[str, Any], as_tuple: bool = True) -> dict[Relation, Any]:
    return {Relation(k): (tuple(v) if as_tuple else v) for k, v in raw.items()}


def lexicon_from_dict(doc: Mapping[str, Any]) -> Lexicon:
    try:
        return Lexicon(
            language=doc["language"],
            relation_phrases=_rel_map(doc["relation_phrases"]),
            anchor_templates=tuple(doc["anchor_templates"]),
            cue_templates=_rel_map(doc["cue_templates"]),
            synonym_table={k: tuple(v) for k, v in doc.get("synonym_table", {}).items()},
            confusion_table={k: tuple(v) for k, v in doc.get("confusion_table", {}).items()},
            filler_tokens=tuple(doc.get("filler_tokens", ())),
            vague_references={k: tuple(v) for k, v in doc.get("vague_references", {}).items()},
            uncertainty_markers=tuple(doc.get("uncertainty_markers", ())),
            underspecified_references={
                k: tuple(v) for k, v in doc.get("underspecified_references", {}).items()
            },
            short_relation_phrases=_rel_map(doc.get("short_relation_phrases", {}), as_tuple=False),
            category_names=dict(doc.get("category_names", {})),
            clause_separator=doc.get("clause_separator", ", "),
            final_conjunction=doc.get("final_conjunction", ""),
            connectives=tuple(doc.get("connectives", ())),
            copulas=tuple(doc.get("copulas", ())),
            anchor_prefixes=tuple(doc.get("anchor_prefixes", ())),
            trace=dict(doc.get("trace", {})),
        )
    except (KeyError, ValueError) as exc:
        raise LexiconError(f"malformed lexicon: {exc}") from None


def load_lexicon(source: str | Path | Mapping[str, Any]) -> Lexicon:
    if isinstance(source, Mapping):
        return lexicon_from_dict(source)
    return lexicon_from_dict(json.loads(Path(source).read_text(encoding="utf-8")))


SHIPPED_LEXICONS = ("zh-TW", "en")


@lru_cache(maxsize=None)
def shipped_lexicon(language: str) -> Lexicon:
    if language not in SHIPPED_LEXICONS:
        raise KeyError(f"no shipped lexicon for {language!r}")
    text = _data_file("lexicons", f"{language}.json").read_text(encoding="utf-8")
    return lexicon_from_dict(json.loads(text))


def resolve_lexicon(ref: str | Path) -> Lexicon:
    if isinstance(ref, str) and ref in SHIPPED_LEXICONS:
        return shipped_lexicon(ref)
    return load_lexicon(Path(ref))


# ---------------------------------------------------------------------------
# matching helpers


def find_phrases(text: str, phrases: Iterable[str]) -> list[tuple[int, int, str]]:
    """Leftmost-longest, non-overlapping occurrences of `phrases` in `text`."""
    ordered = sorted({p for p in phrases if p}, key=len, reverse=True)
    hits = []
    i = 0
    while i < len(text):
        for p in ordered:
            if text.startswith(p, i):
                hits.append((i, i + len(p), p))
                i += len(p)
                break
        else:
            i += 1
    return hits


def _strip_suffix_words(text: str, words: Sequence[str], spaced: bool) -> str:
    text = text.rstrip()
    changed = True
    while changed and text:
        changed = False
        for w in sorted(words, key=len, reverse=True):
            if spaced:
                if text == w or text.endswith(" " + w):
                    text = text[: len(text) - len(w)].rstrip()
                    changed = True
                    break
            elif text.endswith(w) and len(text) > len(w):
                text = text[: len(text) - len(w)]
                changed = True
                break
    return text


def _word_boundary(word: str, after: str) -> bool:
    return word[-1:].isspace() or not after or not after[0].isalnum()


def _strip_prefix_words(text: str, words: Sequence[str], spaced: bool) -> tuple[str, str]:
    """Split leading `words` off `text`; returns (stripped prefix, remainder)."""
    head = ""
    changed = True
    while changed:
        changed = False
        body = text[len(head):]
        lead = len(body) - len(body.lstrip())
        for w in sorted(words, key=len, reverse=True):
            if body[lead:].startswith(w) and (not spaced or _word_boundary(w, body[lead + len(w):])):
                head = text[: len(head) + lead + len(w)]
                changed = True
                break
    return head, text[len(head):]


# ---------------------------------------------------------------------------
# clauses


@dataclass
class Clause:
    role: str  # "anchor", "cue" or "other"
    prefix: str
    mention: str
    suffix: str
    relation: Relation | None = None
    landmark_id: str | None = None

    @property
    def text(self) -> str:
        return self.prefix + self.mention + self.suffix


def _split_segments(text: str, lex: Lexicon) -> list[str]:
    phrases = lex.all_relation_phrases()
    segments = []
    for raw in _SEPARATORS.split(text):
        # several relation phrases without a separator: cut after each phrase
        hits = find_phrases(raw, phrases)
        start = 0
        for _, end, _ in hits[:-1]:
            segments.append(raw[start:end])
            start = end
        segments.append(raw[start:])
    return [s.strip(_EDGE_PUNCT) for s in segments if s.strip(_EDGE_PUNCT)]


def parse_clauses(text: str, lex: Lexicon) -> list[Clause]:
    phrases = lex.all_relation_phrases()
    strip_words = tuple(lex.copulas) + tuple(lex.uncertainty_markers)
    clauses = []
    for seg in _split_segments(text, lex):
        conn, body = _strip_prefix_words(seg, lex.connectives, lex.spaced)
        hits = find_phrases(body, phrases)
        if hits:
            s, e, phrase = hits[0]
            rel = phrases[phrase]
            before, after = body[:s], body[e:]
            if before.strip():
                mention = _strip_suffix_words(before, strip_words, lex.spaced).strip()
                lead = before[: len(before) - len(before.lstrip())]
                clauses.append(Clause("cue", conn + lead, mention, before[len(lead) + len(mention):] + phrase + after, rel))
            else:
                head, rest = _strip_prefix_words(after, strip_words, lex.spaced)
                mention = rest.strip()
                clauses.append(Clause("cue", conn + before + phrase + head + rest[: len(rest) - len(rest.lstrip())], mention, "", rel))
            continue
        head, rest = _strip_prefix_words(body, lex.anchor_prefixes, lex.spaced)
        if head:
            fill, rest2 = _strip_prefix_words(rest, lex.filler_tokens, lex.spaced)
            lead = rest2[: len(rest2) - len(rest2.lstrip())]
            clauses.append(Clause("anchor", conn + head + fill + lead, rest2.strip(), ""))
        else:
            clauses.append(Clause("other", conn, body, ""))
    return clauses


def join_clauses(clauses: Sequence[Clause], lex: Lexicon) -> tuple[str, list[tuple[int, int]]]:
    """Join clause texts; also return each clause's mention span."""
    out, spans, pos = [], [], 0
    for i, c in enumerate(clauses):
        if i:
            out.append(lex.clause_separator)
            pos += len(lex.clause_separator)
        start = pos + len(c.prefix)
        spans.append((start, start + len(c.mention)))
        out.append(c.text)
        pos += len(c.text)
    return "".join(out), spans


# ---------------------------------------------------------------------------
# landmark name resolution


def _norm(s: str) -> str:
    s = " ".join(s.casefold().split()).strip(_EDGE_PUNCT)
    for art in ("the ", "a ", "an "):
        if s.startswith(art):
            s = s[len(art):]
    return s


class NameIndex:
    """Maps surface mentions (any language, synonyms applied) to landmark ids."""

    def __init__(self, env: GridEnvironment, lex: Lexicon | None = None):
        self.env = env
        self.synonyms = dict(lex.synonym_table) if lex else {}
        table: dict[str, str] = {}
        for lm in env.landmarks:
            forms = {lm.id, lm.id.replace("_", " "), *lm.names.values()}
            for f in list(forms):
                for key, subs in self.synonyms.items():
                    if key in f:
                        forms.update(f.replace(key, s) for s in subs)
            for f in forms:
                table.setdefault(_norm(f), lm.id)
        self.table = table

    def resolve(self, mention: str) -> str | None:
        key = _norm(mention)
        if key in self.table:
            return self.table[key]
        for cand in self._unsynonym(mention):
            hit = self.table.get(_norm(cand))
            if hit:
                return hit
        return None

    def _unsynonym(self, mention: str) -> list[str]:
        out = []
        for key, subs in self.synonyms.items():
            for s in subs:
                if s in mention:
                    out.append(mention.replace(s, key))
        return out


_INDEX_CACHE: dict[tuple[int, str], NameIndex] = {}


def name_index(env: GridEnvironment, lex: Lexicon | None = None) -> NameIndex:
    key = (id(env), lex.language if lex else "")
    idx = _INDEX_CACHE.get(key)
    if idx is None or idx.env is not env:
        idx = _INDEX_CACHE[key] = NameIndex(env, lex)
    return idx


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class UtteranceSpec:
    anchor_landmark_id: str
    cues: tuple[tuple[Relation, str], ...]
    variation: str = "none"
    language: str = "zh-TW"
    seed: int = 0
    code_switch_rate: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "cues", tuple((Relation(r), i) for r, i in self.cues))
        if not self.cues:
            raise ValueError("an utterance needs at least one cue")
        rels = [r for r, _ in self.cues]
        if len(set(rels)) != len(rels):
            raise ValueError("relations within one utterance must be distinct")
        if self.variation not in VARIATIONS:
            raise ValueError(f"unknown variation {self.variation!r}")


@dataclass(frozen=True)
class RenderedCue:
    relation: Relation
    landmark_id: str
    span: tuple[int, int]


@dataclass(frozen=True)
class Rendering:
    text: str
    anchor_span: tuple[int, int]
    cues: tuple[RenderedCue, ...]
    variation: str
    notes: tuple[str, ...] = ()
    switched: bool = False

    @property
    def cue_order(self) -> list[tuple[Relation, str]]:
        return [(c.relation, c.landmark_id) for c in self.cues]


def _alt_language(lang: str, env: GridEnvironment) -> str | None:
    others = sorted(l for l in env.languages if l != lang)
    if "en" in others:
        return "en"
    return others[0] if others else None


def _canonical_clauses(spec: UtteranceSpec, env: GridEnvironment, lex: Lexicon, rng: random.Random) -> tuple[list[Clause], bool]:
    alt = _alt_language(lex.language, env)
    switched = False

    def name(lid: str) -> str:
        nonlocal switched
        lm = env.landmark(lid)
        if alt and spec.code_switch_rate and rng.random() < spec.code_switch_rate:
            switched = True
            return lm.name(alt)
        return lm.name(lex.language)

    clauses = [Clause("anchor", lex.anchor_prefix, name(spec.anchor_landmark_id), "", landmark_id=spec.anchor_landmark_id)]
    for rel, lid in spec.cues:
        pre, post = lex.cue_templates[rel][0].split("{landmark}")
        clauses.append(Clause("cue", pre, name(lid), post, rel, lid))
    clauses[-1].prefix = lex.final_conjunction + clauses[-1].prefix
    return clauses, switched


def render(spec: UtteranceSpec, env: GridEnvironment, lex: Lexicon) -> Rendering:
    """Render `spec` in `lex`'s language, applying its variation."""
    if lex.language != spec.language:
        raise LexiconError(f"spec wants {spec.language} but lexicon is {lex.language}")
    for lid in (spec.anchor_landmark_id, *(i for _, i in spec.cues)):
        env.landmark(lid)
    rng = substream(spec.seed, "utterance", spec.anchor_landmark_id, *(f"{r.value}:{i}" for r, i in spec.cues))
    clauses, switched = _canonical_clauses(spec, env, lex, rng)
    notes = _transform(clauses, spec.variation, lex, rng, env)
    text, spans = join_clauses(clauses, lex)
    cues = tuple(
        RenderedCue(c.relation, c.landmark_id, span)
        for c, span in zip(clauses, spans)
        if c.role == "cue"
    )
    anchor_span = next(span for c, span in zip(clauses, spans) if c.role == "anchor")
    return Rendering(text, anchor_span, cues, spec.variation, tuple(notes), switched)


def apply_variation(
    text: str,
    kind: str,
    lex: Lexicon,
    seed: int,
    env: GridEnvironment | None = None,
) -> str:
    """Apply one robustness transform directly to rendered text.

    Returns `text` unchanged when the transform has no site to act on.
    """
    if kind not in VARIATIONS:
        raise ValueError(f"unknown variation {kind!r}")
    clauses = parse_clauses(text, lex)
    if env is not None:
        idx = name_index(env, lex)
        for c in clauses:
            if c.role in ("anchor", "cue"):
                c.landmark_id = idx.resolve(c.mention)
    notes = _transform(clauses, kind, lex, substream(seed, "variation", kind, text), env)
    if notes and notes[-1].startswith("identity"):
        return text
    return join_clauses(clauses, lex)[0]


def _transform(clauses: list[Clause], kind: str, lex: Lexicon, rng: random.Random, env: GridEnvironment | None) -> list[str]:
    if kind == "none":
        return []
    return _TRANSFORMS[kind](clauses, lex, rng, env)


def _strip_connective(c: Clause, lex: Lexicon) -> None:
    head, _ = _strip_prefix_words(c.prefix, lex.connectives, lex.spaced)
    c.prefix = c.prefix[len(head):].lstrip() if head else c.prefix


def _word_order(clauses: list[Clause], lex: Lexicon, rng: random.Random, env) -> list[str]:
    cue_pos = [i for i, c in enumerate(clauses) if c.role == "cue"]
    if not cue_pos:
        return ["identity: no cue clause"]
    for c in clauses:
        _strip_connective(c, lex)
    if len(cue_pos) == 1:
        # sentence inversion: the cue clause moves ahead of everything else
        cue = clauses.pop(cue_pos[0])
        clauses.insert(0, cue)
        clauses[-1].prefix = lex.final_conjunction + clauses[-1].prefix
        return ["inversion"]
    cues = [clauses[i] for i in cue_pos]
    order = list(range(len(cues)))
    while order == sorted(order):
        rng.shuffle(order)
    for slot, k in zip(cue_pos, order):
        clauses[slot] = cues[k]
    clauses[cue_pos[-1]].prefix = lex.final_conjunction + clauses[cue_pos[-1]].prefix
    return [f"permutation {order}"]


def _synonym(clauses: list[Clause], lex: Lexicon, rng: random.Random, env) -> list[str]:
    sites = []
    for ci, c in enumerate(clauses):
        for part in ("prefix", "mention", "suffix"):
            for s, e, key in find_phrases(getattr(c, part), lex.synonym_table):
                sites.append((ci, part, s, e, key))
    if not sites:
        return ["identity: no synonym site"]
    chosen = [site for site in sites if rng.random() < 0.5] or [rng.choice(sites)]
    # replace right-to-left so earlier offsets stay valid
    for ci, part, s, e, key in sorted(chosen, key=lambda t: (t[0], t[1], -t[2])):
        c = clauses[ci]
        val = getattr(c, part)
        setattr(c, part, val[:s] + rng.choice(lex.synonym_table[key]) + val[e:])
    return [f"synonym {key}" for *_, key in chosen]


def _vague(table_name: str):
    def transform(clauses: list[Clause], lex: Lexicon, rng: random.Random, env) -> list[str]:
        table = getattr(lex, table_name)
        notes = []
        for c in clauses:
            if c.role not in ("anchor", "cue"):
                continue
            options = list(table.get(c.role, ()))
            category = None
            if env is not None and c.landmark_id and c.landmark_id in env:
                category = lex.category_names.get(env.landmark(c.landmark_id).category)
            usable = [o for o in options if "{category}" not in o or category]
            if not usable:
                continue
            c.mention = rng.choice(usable).replace("{category}", category or "")
            if c.role == "cue":
                _strip_connective(c, lex)
            notes.append(f"{c.role} -> {c.mention}")
        return notes or ["identity: no landmark mention"]

    return transform


def _incomplete(clauses: list[Clause], lex: Lexicon, rng: random.Random, env) -> list[str]:
    notes = []
    anchor = next((c for c in clauses if c.role == "anchor"), None)
    if anchor is not None and lex.filler_tokens:
        filler = rng.choice(lex.filler_tokens)
        pre = anchor.prefix.rstrip()
        anchor.prefix = pre + filler + (" " if lex.spaced else "")
        notes.append(f"filler {filler}")
    cues = [c for c in clauses if c.role == "cue"]
    if cues and lex.uncertainty_markers:
        c = rng.choice(cues)
        marker = rng.choice(lex.uncertainty_markers)
        short = lex.short_relation_phrases.get(c.relation, lex.canonical_phrase(c.relation))
        _strip_connective(c, lex)
        c.suffix = f" {marker} {short}" if lex.spaced else f"{marker}{short}"
        notes.append(f"uncertain {c.relation.value}")
    return notes or ["identity: nothing to disfluent"]


_TRANSFORMS = {
    "word_order": _word_order,
    "synonym": _synonym,
    "referential_ambiguity": _vague("vague_references"),
    "underspecified": _vague("underspecified_references"),
    "incomplete": _incomplete,
}


# ---------------------------------------------------------------------------
# extraction


@dataclass(frozen=True)
class Unresolved:
    text: str


@dataclass(frozen=True)
class ExtractedCue:
    relation: Relation
    landmark: str | Unresolved
    span: tuple[int, int]

    @property
    def pair(self) -> tuple[Relation, str | Unresolved]:
        return (self.relation, self.landmark)


def extract_relations(text: str, lex: Lexicon, env: GridEnvironment | None = None) -> list[ExtractedCue]:
    """(relation, landmark) pairs in surface order.

    Mentions that do not name a landmark of `env` come back as
    :class:`Unresolved` carrying the raw mention text.
    """
    idx = name_index(env, lex) if env is not None else None
    out = []
    cursor = 0
    for c in parse_clauses(text, lex):
        if c.role != "cue":
            continue
        start = text.find(c.mention, cursor) if c.mention else -1
        span = (start, start + len(c.mention)) if start >= 0 else (-1, -1)
        if start >= 0:
            cursor = span[1]
        lid = idx.resolve(c.mention) if idx and c.mention else None
        out.append(ExtractedCue(c.relation, lid if lid else Unresolved(c.mention), span))
    return out
