"""Markovian susceptible-infectious-recovered epidemic model.

The population evolves one transition at a time: an infection occurs
with probability proportional to ``r0/M * S * I`` and a recovery with
probability proportional to ``I``; the chain terminates when nobody is
infectious.  The observation is the number of recovered individuals in
a simple random sample drawn at termination.

The staged decomposition cuts the chain after a fixed number of
transitions; the decision statistic is the number infectious at the
cut.  Simulated cost units equal the number of transitions executed
(plus one unit for the final subsample draw), so costs are
deterministic given the random streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..staged import Stage, StagedModel

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None


class ChainTerminated(RuntimeError):
    """No transition is possible once the infectious count reaches zero."""


@dataclass(frozen=True)
class SirConfig:
    population: int = 100_000
    initial_infected: int = 1_000
    initial_recovered: int = 0
    checkpoint_transitions: int = 1_000
    subsample_size: int = 100
    observed_count: int = 0

    def __post_init__(self):
        if self.initial_susceptible < 0:
            raise ValueError("initial counts exceed the population size")
        if self.subsample_size > self.population:
            raise ValueError("subsample size exceeds the population size")
        if not (0 <= self.observed_count <= self.subsample_size):
            raise ValueError("observed count must lie in [0, subsample_size]")

    @property
    def initial_susceptible(self) -> int:
        return self.population - self.initial_infected - self.initial_recovered


def infection_probability(s: int, i: int, r0: float, population: int) -> float:
    """Probability that the next transition is an infection."""
    if i <= 0:
        raise ChainTerminated("no infectious individuals remain")
    rate = r0 * s / population
    return rate / (rate + 1.0)


def sir_transition(state: tuple[int, int, int], r0: float, rng: np.random.Generator):
    """Apply one transition to ``(S, I, R)``; raises once the chain is dead."""
    s, i, r = state
    p = infection_probability(s, i, r0, s + i + r)
    if rng.random() < p:
        return (s - 1, i + 1, r)
    return (s, i - 1, r + 1)


def _chain_kernel_py(s, i, r, r0_over_m, max_steps, uniforms):
    steps = 0
    pos = 0
    n = uniforms.shape[0]
    while i > 0 and steps < max_steps:
        if pos >= n:
            return s, i, r, steps, False
        rate = r0_over_m * s
        if uniforms[pos] < rate / (rate + 1.0):
            s -= 1
            i += 1
        else:
            i -= 1
            r += 1
        pos += 1
        steps += 1
    return s, i, r, steps, True


if njit is not None:
    _chain_kernel = njit(cache=True, nogil=True)(_chain_kernel_py)
else:  # pragma: no cover
    _chain_kernel = _chain_kernel_py

_BUFFER = 16_384


def run_transitions(
    state: tuple[int, int, int],
    r0: float,
    max_transitions: int,
    rng: np.random.Generator,
) -> tuple[tuple[int, int, int], int]:
    """Run up to ``max_transitions`` transitions (or to extinction).

    Uniform variates are consumed one per transition, drawn from ``rng``
    in fixed-size blocks; the simulated path is identical to applying
    :func:`sir_transition` repeatedly with the same generator.
    """
    s, i, r = state
    m = s + i + r
    done = 0
    while i > 0 and done < max_transitions:
        u = rng.random(min(_BUFFER, max_transitions - done))
        s, i, r, steps, _ = _chain_kernel(s, i, r, r0 / m, max_transitions - done, u)
        done += steps
    return (s, i, r), done


def _max_transitions(config: SirConfig) -> int:
    # Each recovery removes one ever-infected individual, so the chain
    # makes at most 2M + I(0) transitions.
    return 2 * config.population + config.initial_infected + 10


def sir_staged_model(config: SirConfig) -> StagedModel:
    """Two-stage model: run to the checkpoint, then to extinction.

    Stage 1 runs ``checkpoint_transitions`` transitions (or stops at
    extinction); the decision statistic is the infectious count at the
    cut.  Stage 2 runs the remainder and draws the terminal subsample.
    The summary is the recovered count in the subsample and the
    distance is the absolute difference of summaries.
    """
    hard_cap = _max_transitions(config)

    def stage_initial(theta, state, rng):
        r0 = float(np.asarray(theta).ravel()[0])
        start = (config.initial_susceptible, config.initial_infected, config.initial_recovered)
        (s, i, r), steps = run_transitions(
            start, r0, config.checkpoint_transitions, rng
        )
        return (s, i, r), float(steps)

    def stage_complete(theta, state, rng):
        r0 = float(np.asarray(theta).ravel()[0])
        # Separate child streams so the subsample draw does not depend
        # on how many uniforms the buffered chain loop drew.
        chain_rng, sample_rng = rng.spawn(2)
        (s, i, r), steps = run_transitions(state, r0, hard_cap, chain_rng)
        if i != 0:
            raise RuntimeError("chain failed to terminate within the hard cap")
        recovered_in_sample = int(
            sample_rng.hypergeometric(r, config.population - r, config.subsample_size)
        )
        return (s, i, r, recovered_in_sample), float(steps) + 1.0

    def phi_infectious(theta, state):
        return np.array([float(state[1])])

    def summarize(state):
        return np.array([float(state[3])])

    def distance(s1, s2):
        return float(abs(s1[0] - s2[0]))

    model_id = (
        f"sir-M{config.population}-I{config.initial_infected}"
        f"-t{config.checkpoint_transitions}-k{config.subsample_size}"
    )
    return StagedModel(
        model_id=model_id,
        stages=(
            Stage("to-checkpoint", stage_initial),
            Stage("to-extinction", stage_complete),
        ),
        decision_stats=(phi_infectious,),
        summarize=summarize,
        distance=distance,
        observed_summary=np.array([float(config.observed_count)]),
        data_id=f"yobs-{config.observed_count}",
    )


def simulate_observation(config: SirConfig, r0_true: float, rng: np.random.Generator) -> int:
    """Simulate one terminal subsample count under ``r0_true``."""
    start = (config.initial_susceptible, config.initial_infected, config.initial_recovered)
    chain_rng, sample_rng = rng.spawn(2)
    (s, i, r), _ = run_transitions(start, r0_true, _max_transitions(config), chain_rng)
    return int(sample_rng.hypergeometric(r, config.population - r, config.subsample_size))


def final_fraction_fixed_point(r0: float) -> float:
    """Positive root of ``r = 1 - exp(-r0 * r)``, the large-outbreak
    recovered fraction; solved by bisection."""
    if r0 <= 1.0:
        return 0.0
    lo, hi = 1e-9, 1.0
    f = lambda r: r - (1.0 - math.exp(-r0 * r))
    # f(lo) > 0 is possible only below the epidemic threshold; bracket
    # from the interior instead.
    lo = 0.5 / r0
    while f(lo) > 0:
        lo /= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
