"""Deterministic random-stream derivation.

Every source of randomness in the library draws from a generator derived
from (base seed, stream id, ...indices).  Derived streams are pure
functions of their keys, so dataset generation is parallelizable per
record and training is resumable without serializing generator state.
"""

from __future__ import annotations

import numpy as np

# Stream ids, kept stable so that saved seeds reproduce old artifacts.
STREAM_MODEL_INIT = 0
STREAM_BATCH_ORDER = 1
STREAM_INTERPOLATION = 2
STREAM_RECORD = 3


def derived_rng(*keys: int) -> np.random.Generator:
    """Generator seeded from an integer key path, e.g. (seed, stream, index)."""
    for k in keys:
        if int(k) < 0:
            raise ValueError(f"rng keys must be non-negative, got {keys}")
    return np.random.default_rng([int(k) for k in keys])
