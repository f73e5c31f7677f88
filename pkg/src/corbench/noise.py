"""Text-level stand-in for a TTS -> ASR loop.

Corruption is driven by a target character error rate: whole landmark
mentions may be swapped for listed misrecognitions, and the remaining edit
budget is spent on single-character substitutions, insertions and deletions.
"""

from __future__ import annotations

import random
import string
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .rng import substream
from .utterance import Lexicon, find_phrases

SEVERITY_LABELS = ("perfect", "minor", "moderate", "major", "severe")

# exact per-bucket counts of the two evaluation sets
MAIN_SET_COUNTS = {"perfect": 101, "minor": 222, "moderate": 258, "major": 102, "severe": 13}
CROSS_DOMAIN_COUNTS = {"perfect": 143, "minor": 207, "moderate": 156, "major": 32, "severe": 2}

_EPS = 1e-12


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    if not reference:
        raise ValueError("CER is undefined for an empty reference")
    return levenshtein(reference, hypothesis) / len(reference)


@dataclass(frozen=True)
class SeverityThresholds:
    """Upper CER bounds of the minor/moderate/major buckets.

    `perfect` is CER == 0 exactly and `severe` is everything above `major`.
    """

    minor: float = 0.05
    moderate: float = 0.15
    major: float = 0.30

    def __post_init__(self) -> None:
        if not 0 < self.minor < self.moderate < self.major <= 1:
            raise ValueError("severity cut-points must increase strictly within (0, 1]")

    def label(self, value: float) -> str:
        if value <= 0:
            return "perfect"
        if value <= self.minor + _EPS:
            return "minor"
        if value <= self.moderate + _EPS:
            return "moderate"
        if value <= self.major + _EPS:
            return "major"
        return "severe"

    def bounds(self, label: str, ceiling: float = 0.45) -> tuple[float, float]:
        """Half-open CER interval (low, high] covered by `label`."""
        edges = {
            "minor": (0.0, self.minor),
            "moderate": (self.minor, self.moderate),
            "major": (self.moderate, self.major),
            "severe": (self.major, max(ceiling, self.major)),
        }
        if label == "perfect":
            return (0.0, 0.0)
        return edges[label]


DEFAULT_THRESHOLDS = SeverityThresholds()


def classify_severity(reference: str, hypothesis: str, thresholds: SeverityThresholds = DEFAULT_THRESHOLDS) -> str:
    return thresholds.label(cer(reference, hypothesis))


@dataclass(frozen=True)
class CorruptionConfig:
    target_cer: float = 0.10
    edit_mix: Mapping[str, float] = field(
        default_factory=lambda: {"substitute": 0.6, "insert": 0.2, "delete": 0.2}
    )
    confusion_bias: float = 0.5
    protect_relation_phrases: bool = True
    landmark_corruption_rate: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.target_cer < 1:
            raise ValueError("target_cer must lie in [0, 1)")
        weights = [self.edit_mix.get(k, 0.0) for k in ("substitute", "insert", "delete")]
        if any(w < 0 for w in weights) or not any(weights):
            raise ValueError("edit_mix weights must be non-negative and not all zero")
        if not 0 <= self.confusion_bias <= 1 or not 0 <= self.landmark_corruption_rate <= 1:
            raise ValueError("confusion_bias and landmark_corruption_rate must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: Mapping) -> CorruptionConfig:
        return cls(**{k: v for k, v in raw.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return {
            "target_cer": self.target_cer,
            "edit_mix": dict(self.edit_mix),
            "confusion_bias": self.confusion_bias,
            "protect_relation_phrases": self.protect_relation_phrases,
            "landmark_corruption_rate": self.landmark_corruption_rate,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Corruption:
    transcript: str
    cer: float
    edits: int
    confusions: tuple[tuple[str, str], ...] = ()


def _alphabet(text: str, lexicon: Lexicon) -> list[str]:
    if lexicon.spaced:
        return list(string.ascii_lowercase)
    pool = set(text)
    for subs in lexicon.confusion_table.values():
        for s in subs:
            pool.update(s)
    return sorted(c for c in pool if not c.isspace())


def _protected(text: str, lexicon: Lexicon) -> list[bool]:
    locked = [False] * len(text)
    for s, e, _ in find_phrases(text, lexicon.all_relation_phrases()):
        for i in range(s, e):
            locked[i] = True
    return locked


def _random_edit(chars: list[str], locked: list[bool], op: str, alphabet: list[str], rng: random.Random) -> bool:
    free = [i for i, l in enumerate(locked) if not l]
    if not free:
        return False
    i = rng.choice(free)
    if op == "substitute":
        choices = [c for c in alphabet if c != chars[i]]
        chars[i] = rng.choice(choices)
        locked[i] = True
    elif op == "delete" and len(chars) > 1:
        del chars[i]
        del locked[i]
    else:
        chars.insert(i, rng.choice(alphabet))
        locked.insert(i, True)
    return True


def corrupt_detailed(text: str, config: CorruptionConfig, lexicon: Lexicon) -> Corruption:
    n = len(text)
    target_edits = int(config.target_cer * n + 0.5)
    if n == 0 or target_edits == 0:
        return Corruption(text, 0.0, 0)
    rng = substream(config.seed, "corrupt", text)
    locked = _protected(text, lexicon) if config.protect_relation_phrases else [False] * n

    # whole-mention misrecognitions first, bounded by a share of the budget
    chars = list(text)
    spent = 0
    confusions = []
    if config.confusion_bias > 0 and config.landmark_corruption_rate > 0:
        sites = [
            (s, e, key)
            for s, e, key in find_phrases(text, lexicon.confusion_table)
            if not any(locked[s:e])
        ]
        cap = config.confusion_bias * target_edits
        picked = []
        for s, e, key in sites:
            if rng.random() >= config.landmark_corruption_rate:
                continue
            sub = rng.choice(lexicon.confusion_table[key])
            cost = levenshtein(key, sub)
            if spent + cost <= cap + _EPS:
                picked.append((s, e, key, sub))
                spent += cost
        for s, e, key, sub in sorted(picked, reverse=True):
            chars[s:e] = list(sub)
            locked[s:e] = [True] * len(sub)
            confusions.append((key, sub))
        confusions.reverse()

    # a mention's neighbours stay editable, the mention itself does not
    alphabet = _alphabet(text, lexicon)
    ops = list(config.edit_mix)
    weights = [config.edit_mix[o] for o in ops]
    for _ in range(target_edits - spent):
        _random_edit(chars, locked, rng.choices(ops, weights)[0], alphabet, rng)

    out = "".join(chars)
    dist = levenshtein(text, out)
    # edits can cancel (e.g. insert next to an identical char); top up
    attempts = 0
    while dist < target_edits and attempts < 4 * target_edits:
        attempts += 1
        if not _random_edit(chars, locked, "substitute", alphabet, rng):
            locked = [False] * len(chars) if not config.protect_relation_phrases else _protected("".join(chars), lexicon)
            if not _random_edit(chars, locked, "substitute", alphabet, rng):
                break
        out = "".join(chars)
        dist = levenshtein(text, out)
    return Corruption(out, dist / n, dist, tuple(confusions))


def corrupt(text: str, config: CorruptionConfig, lexicon: Lexicon) -> tuple[str, float]:
    """Noisy transcript of `text` and its achieved CER."""
    c = corrupt_detailed(text, config, lexicon)
    return c.transcript, c.cer


# ---------------------------------------------------------------------------
# calibration against a severity mixture


def allocate(total: int, weights: Mapping[str, float]) -> dict[str, int]:
    """Largest-remainder split of `total` proportional to `weights`."""
    norm = sum(weights.values())
    raw = {k: total * w / norm for k, w in weights.items()}
    counts = {k: int(v) for k, v in raw.items()}
    short = total - sum(counts.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - counts[k]), list(raw).index(k)))[:short]:
        counts[k] += 1
    return counts


def feasible_edit_counts(label: str, length: int, thresholds: SeverityThresholds = DEFAULT_THRESHOLDS) -> range:
    if label == "perfect":
        return range(0, 1)
    lo, hi = thresholds.bounds(label)
    first = int(lo * length + _EPS) + 1
    last = int(hi * length + _EPS)
    return range(first, last + 1)


def assign_severity_targets(
    lengths: Sequence[int],
    counts: Mapping[str, float],
    rng: random.Random,
    thresholds: SeverityThresholds = DEFAULT_THRESHOLDS,
) -> list[tuple[str, float]]:
    """Give each text a severity bucket and a CER target inside it.

    Bucket sizes follow `counts` (rescaled to len(lengths)).  Texts too short
    for a narrow bucket are steered to buckets they can reach.
    """
    quota = allocate(len(lengths), counts)
    order = list(range(len(lengths)))
    rng.shuffle(order)
    labels: dict[int, str] = {}
    # most constrained buckets pick first
    by_scarcity = sorted(
        SEVERITY_LABELS,
        key=lambda lab: sum(1 for n in lengths if not feasible_edit_counts(lab, n, thresholds)),
        reverse=True,
    )
    for lab in by_scarcity:
        need = quota.get(lab, 0)
        free = [i for i in order if i not in labels]
        ok = [i for i in free if feasible_edit_counts(lab, lengths[i], thresholds)]
        take = ok[:need]
        if len(take) < need:
            take += [i for i in free if i not in set(ok)][: need - len(take)]
        for i in take:
            labels[i] = lab
    out = []
    for i, n in enumerate(lengths):
        lab = labels[i]
        ks = feasible_edit_counts(lab, n, thresholds)
        k = rng.choice(ks) if ks else max(1, min(n, int(thresholds.bounds(lab)[1] * n)))
        out.append((lab, k / n if n else 0.0))
    return out
