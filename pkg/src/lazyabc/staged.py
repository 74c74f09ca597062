"""Contract for simulators decomposed into stages with checkpoints.

A staged model splits one data simulation into consecutive stages.
Between stages sit checkpoints, where a low-dimensional decision
statistic can be extracted from the partial simulation.  Running all
stages in order must reproduce the unsegmented simulation exactly:
staging changes where the bookkeeping happens, never the law of the
simulated data.

Each stage is a pure function of (theta, state, rng) and additionally
declares its cost in deterministic simulated units, used when a run is
configured with ``cost_mode="sim"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class SimulationError(RuntimeError):
    """A stage failed and the model registered no fallback."""


@dataclass(frozen=True)
class Stage:
    """One simulation stage.

    ``run(theta, state, rng)`` returns ``(new_state, sim_cost)`` where
    ``sim_cost`` is the stage's declared cost in simulated units
    (non-negative).
    """

    name: str
    run: Callable[[np.ndarray, object, np.random.Generator], tuple]


@dataclass(frozen=True, eq=False)
class StagedModel:
    """A simulator split into stages with checkpoint decision statistics.

    ``decision_stats[k]`` maps ``(theta, state-after-stage-k)`` to the
    checkpoint-k decision statistic vector; there is one checkpoint
    between each pair of consecutive stages.  ``summarize`` extracts
    the summary vector from the final state and ``distance`` compares
    two summary vectors.  Instances are immutable and safe to share
    across workers.
    """

    model_id: str
    stages: tuple[Stage, ...]
    decision_stats: tuple[Callable[[np.ndarray, object], np.ndarray], ...]
    summarize: Callable[[object], np.ndarray]
    distance: Callable[[np.ndarray, np.ndarray], float]
    observed_summary: np.ndarray
    data_id: str = ""
    # Optional extra per-iteration payload recorded during pilot runs,
    # e.g. intermediate statistics needed to re-evaluate candidate
    # decision statistics after the fact.
    pilot_payload: Optional[Callable[[np.ndarray, object], dict]] = field(
        default=None
    )

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("model needs at least one stage")
        if len(self.decision_stats) != len(self.stages) - 1:
            raise ValueError("need one decision statistic per checkpoint")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_checkpoints(self) -> int:
        return len(self.stages) - 1

    def simulate_full(self, theta, stage_rngs) -> tuple[object, list]:
        """Run every stage without stopping; returns (state, costs)."""
        state = None
        costs = []
        for stage, rng in zip(self.stages, stage_rngs):
            state, c = stage.run(theta, state, rng)
            costs.append(float(c))
        return state, costs
