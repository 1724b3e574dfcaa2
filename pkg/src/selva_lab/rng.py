"""Named random streams derived from one integer seed.

``stream(seed, "train.stage1")`` always returns a generator in the same state,
independent of how many other streams were created before it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *names) -> np.random.Generator:
    key = ".".join(str(n) for n in names)
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_name_words(key)])
    return np.random.Generator(np.random.PCG64(seq))


def child_seed(seed: int, *names) -> int:
    """A derived integer seed, for APIs that take a seed instead of a generator."""
    return int(stream(seed, *names).integers(0, 2**63 - 1))
