"""Named random streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``.

    Streams with different names never share state, so adding draws to one
    (e.g. dropout) does not shift another (e.g. shuffling).
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
