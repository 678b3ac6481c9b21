"""Named random streams derived from a single integer seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``.

    The name is hashed with crc32 so streams are stable across processes and
    Python versions (unlike ``hash``).
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(key))
