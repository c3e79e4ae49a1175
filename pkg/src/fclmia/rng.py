"""Named, reproducible RNG streams.

A stream is identified by a global seed plus a path of names/ints, e.g.
``stream(7, "client", 3, 12)``.  Identical paths always yield identical
generators, independent of call order elsewhere in the program.
"""
import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed, *path):
    return np.random.default_rng([_key(seed), *(_key(p) for p in path)])


def child_seed(seed, *path):
    """Deterministic 32-bit integer derived from a stream path."""
    return int(stream(seed, *path).integers(0, 2**31 - 1))
