"""Seed plumbing.

All randomness goes through numpy's PCG64 bit generator. Components get their
own stream: ``seed + crc32(name)`` reduced mod 2**63, so adding a component
never perturbs the streams of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 63) - 1


def stable_hash(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed(seed: int, name: str) -> int:
    return (int(seed) + stable_hash(name)) & _MASK


def make_rng(seed: int, name: str | None = None) -> np.random.Generator:
    s = int(seed) if name is None else derive_seed(seed, name)
    return np.random.Generator(np.random.PCG64(s))
