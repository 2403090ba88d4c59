"""Deterministic rng streams.

Every stream is ``numpy.random.Generator(PCG64(SeedSequence(seed,
spawn_key=(purpose, batch, episode))))``. SeedSequence hashes the full key,
so streams for distinct keys are independent for practical purposes and a
key always reproduces the same stream, regardless of execution order.
"""

from __future__ import annotations

import numpy as np

EPISODE = 0
BATCH = 1
GATING = 2
EVAL = 3
POLICY = 4
INIT = 5


def seed_stream(seed: int, batch: int, episode: int, purpose: int = EPISODE) -> np.random.Generator:
    if seed < 0 or batch < 0 or episode < 0:
        raise ValueError("seed, batch and episode must be non-negative")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(purpose, int(batch), int(episode))))
