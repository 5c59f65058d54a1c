"""Named, splittable random streams.

Every consumer asks for a stream by (seed, *names); streams are Philox
(counter-based) generators keyed from a SeedSequence, so the same names
always give the same numbers regardless of call order elsewhere.
"""

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [_key(n) for n in names]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
