"""Deterministic per-task seed derivation.

Every stochastic computation gets its own stream derived from
``(run seed, instance index, tag)``, so a parallel run draws exactly the same
numbers as a serial one regardless of scheduling.
"""
import zlib

import numpy as np


def derive_seed(seed: int, index: int, tag: str) -> int:
    ss = np.random.SeedSequence([int(seed), int(index), zlib.crc32(tag.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, index: int = 0, tag: str = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, index, tag))
