"""How the noise simulator hits a CER target and a severity mix.

Run: python3 demos/noise_calibration.py
"""

from __future__ import annotations

import random
from collections import Counter

from corbench.dataset import GenerationPlan, generate
from corbench.noise import (
    MAIN_SET_COUNTS,
    SEVERITY_LABELS,
    CorruptionConfig,
    assign_severity_targets,
    classify_severity,
    corrupt,
)
from corbench.utterance import shipped_lexicon


def main() -> None:
    zh = shipped_lexicon("zh-TW")
    plan = GenerationPlan(variation_count=0, cross_domain_count=0, ambiguity_count=0)
    texts = [i.utterance for i in generate(plan) if i.split == "train"][:1000]

    # below 20 characters the CER grid is too coarse for a 0.02 tolerance
    long_texts = [t for t in texts if len(t) >= 20]
    print(f"{len(long_texts)} texts of 20+ characters")
    print("target  mean CER  worst miss")
    for target in (0.05, 0.10, 0.20, 0.30):
        got = [corrupt(t, CorruptionConfig(target_cer=target, seed=k), zh)[1] for k, t in enumerate(long_texts)]
        worst = max(abs(g - target) for g in got)
        print(f"{target:6.2f}  {sum(got) / len(got):8.3f}  {worst:10.3f}")

    # assign each text a bucket so the whole set follows the evaluation mix
    targets = assign_severity_targets([len(t) for t in texts], MAIN_SET_COUNTS, random.Random(0))
    labels = Counter(
        classify_severity(t, corrupt(t, CorruptionConfig(target_cer=cer, seed=k), zh)[0])
        for k, (t, (_, cer)) in enumerate(zip(texts, targets))
    )
    total = sum(MAIN_SET_COUNTS.values())
    print("\nbucket     wanted   got")
    for label in SEVERITY_LABELS:
        print(f"{label:<10}{100 * MAIN_SET_COUNTS[label] / total:6.1f}%  {100 * labels[label] / len(texts):5.1f}%")


if __name__ == "__main__":
    main()
