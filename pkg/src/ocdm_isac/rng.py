"""Counter-based RNG stream derivation."""
from __future__ import annotations

import numpy as np


def derive_seed(seed, *keys) -> np.random.SeedSequence:
    """Child SeedSequence keyed by integers, independent of call order.

    Args:
        seed: int, SeedSequence, or None (fresh entropy).
        *keys: Non-negative integers appended to the spawn key.
    """
    keys = tuple(int(k) for k in keys)
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + keys)
    if isinstance(seed, np.random.Generator):
        raise TypeError("pass an int or SeedSequence to derive keyed streams")
    return np.random.SeedSequence(seed, spawn_key=keys)


def derive_rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
