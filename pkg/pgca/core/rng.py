import zlib

import numpy as np


def _key_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key)
    # Stable across processes, unlike hash(str).
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed, *keys):
    """Child generator for (seed, *keys). Same arguments, same stream, in any
    order of creation, on any thread."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.default_rng(sequence)
