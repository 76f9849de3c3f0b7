"""Seed plumbing shared by the fitting and simulation drivers."""
from __future__ import annotations

import numpy as np


def seed_sequence(seed) -> np.random.SeedSequence:
    """``seed`` as a fresh SeedSequence.

    A SeedSequence argument is copied so that spawning from the result never
    depends on how often the caller's object has already been spawned from.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def describe_seed(seed):
    """JSON-friendly description of an int or SeedSequence seed."""
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": int(seed.entropy), "spawn_key": [int(k) for k in seed.spawn_key]}
    return seed
