import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for one named purpose ("split", "init", "augment", "sim", ...).

    The same (seed, name, keys) always yields the same stream, and changing one
    component's randomness never shifts another's.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, *[int(k) for k in keys])))
