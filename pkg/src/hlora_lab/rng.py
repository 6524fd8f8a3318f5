"""Named random substreams derived from one run seed.

``stream(seed, "plugins.gen")`` is independent of every other name, so adding
a consumer never shifts another consumer's draws.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
