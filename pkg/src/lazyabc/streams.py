"""Counter-based random number streams.

Every iteration of a sampling run owns a small family of independent
streams, keyed by ``(base_seed, iteration, slot)``.  Slots separate the
parameter draw, the stop-coin draws and each simulation stage, so an
early-stopping run consumes exactly the same randomness for the
parameter and simulation draws as a run that never stops.  Results are
therefore independent of worker count and scheduling order.
"""

from __future__ import annotations

import numpy as np

# Stream slots within one iteration.
SLOT_THETA = 0
SLOT_COIN = 1
SLOT_SIM = 2  # simulation stage k uses slot SLOT_SIM + k


def stream(base_seed: int, iteration: int, slot: int) -> np.random.Generator:
    """Return the generator for one (iteration, slot) cell.

    Built from a ``SeedSequence`` spawn key, so streams for distinct
    cells are statistically independent and reproducible across runs,
    platforms and worker counts.
    """
    if iteration < 0 or slot < 0:
        raise ValueError("iteration and slot must be non-negative")
    ss = np.random.SeedSequence(base_seed, spawn_key=(iteration, slot))
    return np.random.default_rng(ss)


def sim_stream(base_seed: int, iteration: int, stage: int) -> np.random.Generator:
    """Generator for simulation stage ``stage`` of one iteration."""
    return stream(base_seed, iteration, SLOT_SIM + stage)
