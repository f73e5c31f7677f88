"""Named random sub-streams derived from one integer seed.

Each consumer asks for its own stream by name, so adding a consumer never
shifts the draws seen by another.
"""

from __future__ import annotations

import hashlib
import random


def substream(seed: int, *names: object) -> random.Random:
    key = "\x1f".join([str(int(seed)), *map(str, names)]).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))
