"""Named random sub-streams derived from one root seed.

Every consumer asks for ``stream(seed, "sample", "hi", 3)`` style handles, so
changing how one stage consumes randomness never shifts another stage.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(seq)
