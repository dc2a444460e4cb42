"""Counter-based random streams.

Every random decision in the package draws from a stream keyed by
``(master_seed, tag, *counters)``, so the result of a run does not depend on
the order in which users or batches are visited.
"""

import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(master_seed: int, tag: str, *counters: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, tag, counters...)``."""
    entropy = [int(master_seed) & 0xFFFFFFFF, _tag_key(tag)]
    entropy.extend(int(c) & 0xFFFFFFFF for c in counters)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
