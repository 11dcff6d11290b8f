"""Deterministic random streams.

All randomness in the package flows through the Philox counter-based
generator, keyed by a user seed plus an integer stream path via
``SeedSequence(entropy=seed, spawn_key=path)``. Distinct paths give
independent streams, and any (seed, path) pair reproduces its stream
exactly, so Monte Carlo runs and training loops are replayable.
"""

from __future__ import annotations

import numpy as np

# stream-path roots, so independent consumers never collide
INIT_STREAM = 0
DROPOUT_STREAM = 1
MC_STREAM = 2
TRAIN_STREAM = 3
PHANTOM_STREAM = 4


def stream(seed: int, *path: int) -> np.random.Generator:
    """A Philox generator for the given seed and stream path."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
