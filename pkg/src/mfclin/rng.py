"""Counter-based random streams.

Every stream is a Philox generator keyed by (root seed, name, index...), so a
replication's draws do not depend on how many other streams exist or on the
order in which they are consumed.
"""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def make_rng(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def as_rng(rng, *keys) -> np.random.Generator:
    """Accept an int seed or an existing Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(0 if rng is None else rng, *keys)
