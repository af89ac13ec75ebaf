"""Named, order-independent random streams.

Every random draw in a run comes from a generator keyed by the master seed,
a purpose tag and a tuple of integer identifiers, so results do not depend on
the order (or process) in which work items are executed.
"""

import zlib

import numpy as np


def tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(master_seed: int, tag: str, *ids: int) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, tag, *ids)``."""
    key = [int(master_seed), tag_code(tag)] + [int(i) for i in ids]
    if any(k < 0 for k in key):
        raise ValueError("seed components must be non-negative integers")
    return np.random.default_rng(np.random.SeedSequence(key))


def derive_seed(master_seed: int, tag: str, *ids: int) -> int:
    """A 32-bit integer seed derived from a named stream."""
    return int(stream(master_seed, tag, *ids).integers(0, 2**32 - 1))
