"""Named random sub-streams derived from one master seed.

Every source of randomness (weight init, batch shuffling, dropout,
weight noise, data generation) draws from its own child stream so that
perturbing one leaves the others untouched.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {"init": 0, "shuffle": 1, "dropout": 2, "noise": 3, "datagen": 4}


def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Deterministic generator for one named sub-stream of ``seed``."""
    if stream not in _STREAMS:
        raise ValueError(f"unknown rng stream {stream!r}; known: {sorted(_STREAMS)}")
    entropy = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=(_STREAMS[stream],))
    return np.random.default_rng(ss)
