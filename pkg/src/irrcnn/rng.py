"""Labeled random-stream derivation.

Every randomized stage derives its generator from one root seed plus a
string label, so stages are independently reproducible and adding a new
stage never shifts the draws of an existing one.
"""

import zlib

import numpy as np


def fork_rng(seed: int, label: str) -> np.random.Generator:
    """Return a generator for the stream named `label` under `seed`.

    The same (seed, label) pair always yields an identical stream;
    distinct labels yield independent streams.
    """
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,)))
