"""Counter-based, splittable random streams.

Every sampling decision in the pipeline draws from a substream keyed by a
derivation path (seed, epoch, sequence index, ...). Substreams are
statistically independent and cheap to construct, so any degree of
parallelism over sequences reproduces the serial results exactly.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent generator for `path` under a base seed.

    The same (seed, path) always yields the same stream; distinct paths
    yield independent streams (Philox keyed via SeedSequence spawn keys).
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))
