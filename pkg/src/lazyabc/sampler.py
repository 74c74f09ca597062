"""Importance sampling runners and weighted-sample bookkeeping.

Three algorithms share one iteration engine:

* ``run_rw_is``    -- importance sampling with a random likelihood
  estimate in place of a likelihood evaluation.
* ``run_abc_is``   -- the special case whose estimate is the indicator
  that simulated data land within ``epsilon`` of the observations.
* ``run_lazy_abc`` -- the early-stopping variant: at each model
  checkpoint the iteration continues only with probability
  ``alpha(phi)``; completed acceptances are reweighted by the inverse
  of the continuation probabilities applied, which leaves every
  weighted-sample expectation unchanged.

Iterations are independent work items evaluated on any number of
workers; per-iteration counter-based streams make the output a pure
function of ``(base_seed, config)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .distributions import DensityPair
from .staged import SimulationError, StagedModel
from .streams import SLOT_COIN, SLOT_THETA, sim_stream, stream

logger = logging.getLogger(__name__)

ALG_RW_IS = "rw-is"
ALG_ABC_IS = "abc-is"
ALG_LAZY_ABC = "lazy-abc"

COST_MODES = ("wall", "cpu", "sim")


class DegenerateSampleError(RuntimeError):
    """All weights are zero; weighted estimates are undefined."""


class PolicyRangeError(RuntimeError):
    """A continuation probability left (0, 1]."""


class RunAborted(RuntimeError):
    """Too many simulation failures for the configured budget."""


@dataclass(frozen=True)
class WeightedSample:
    """One importance-sampling draw.

    ``continuation_prob`` is the product of continuation probabilities
    applied before the iteration resolved (1 for non-lazy runs);
    ``distance`` is present iff the simulation ran to completion.
    """

    theta: tuple[float, ...]
    weight: float
    early_stopped: bool
    stage_costs: tuple[float, ...]
    distance: Optional[float]
    continuation_prob: float = 1.0

    def __post_init__(self):
        if not (self.weight >= 0.0):
            raise ValueError("weight must be non-negative")
        if any(c < 0 for c in self.stage_costs):
            raise ValueError("stage costs must be non-negative")
        if self.early_stopped and (self.weight != 0.0 or self.distance is not None):
            raise ValueError("early-stopped samples have zero weight and no distance")
        if not (0.0 < self.continuation_prob <= 1.0):
            raise ValueError("continuation probability must lie in (0, 1]")


@dataclass(frozen=True)
class SampleSet:
    """Ordered output of one run plus its run-level metadata."""

    samples: tuple[WeightedSample, ...]
    epsilon: float
    base_seed: int
    algorithm_id: str
    cost_mode: str = "sim"
    model_id: str = ""
    data_id: str = ""

    @property
    def n_iterations(self) -> int:
        return len(self.samples)

    @property
    def total_cost(self) -> float:
        return float(sum(sum(s.stage_costs) for s in self.samples))

    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.samples], dtype=float)

    def thetas(self) -> np.ndarray:
        return np.array([s.theta for s in self.samples], dtype=float)

    def distances(self) -> np.ndarray:
        """Distances with NaN for early-stopped iterations."""
        return np.array(
            [math.nan if s.distance is None else s.distance for s in self.samples]
        )

    def accepted_indices(self) -> np.ndarray:
        return np.flatnonzero(self.weights() > 0.0)


# ---------------------------------------------------------------------------
# iteration engine


def _clock(cost_mode: str):
    if cost_mode == "wall":
        return time.perf_counter
    if cost_mode == "cpu":
        return time.thread_time
    if cost_mode == "sim":
        return None
    raise ValueError(f"unknown cost mode {cost_mode!r}")


def _map_indices(n: int, fn: Callable[[int], object], workers: int) -> list:
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunk = max(1, n // (workers * 8))
        return list(pool.map(fn, range(n), chunksize=chunk))


class _Capture:
    """Per-iteration pilot capture: decision statistics and payloads."""

    def __init__(self, n: int, model: StagedModel):
        self.phi = [[None] * n for _ in range(model.n_checkpoints)]
        self.summary = [None] * n
        self.payload = [None] * n


def _staged_iteration(
    i: int,
    densities: DensityPair,
    model: StagedModel,
    epsilon: float,
    policy,
    base_seed: int,
    cost_mode: str,
    capture: Optional[_Capture],
):
    clock = _clock(cost_mode)
    theta = densities.sample_proposal(stream(base_seed, i, SLOT_THETA))
    u = densities.ratio(theta)
    coin_rng = None
    if policy is not None:
        coin_rng = stream(base_seed, i, SLOT_COIN)

    state = None
    costs: list[float] = []
    phis: list[np.ndarray] = []
    a_prod = 1.0
    stopped = False
    for k, stage in enumerate(model.stages):
        rng = sim_stream(base_seed, i, k)
        try:
            if clock is None:
                state, c = stage.run(theta, state, rng)
                cost = float(c)
            else:
                t0 = clock()
                state, _ = stage.run(theta, state, rng)
                cost = clock() - t0
        except Exception as exc:
            raise SimulationError(
                f"iteration {i}: stage {stage.name!r} failed: {exc}"
            ) from exc
        costs.append(cost)
        if k < model.n_checkpoints:
            phi = np.asarray(model.decision_stats[k](theta, state), dtype=float).ravel()
            phis.append(phi)
            if capture is not None:
                capture.phi[k][i] = phi
            if policy is not None:
                a = float(policy.alpha(k, phi, u, tuple(phis[:-1])))
                if not (0.0 < a <= 1.0) or not math.isfinite(a):
                    raise PolicyRangeError(
                        f"iteration {i}: continuation probability {a!r} at "
                        f"checkpoint {k} lies outside (0, 1]"
                    )
                a_prod *= a
                if coin_rng.random() >= a:
                    stopped = True
                    break

    if stopped:
        return WeightedSample(
            theta=tuple(float(t) for t in theta),
            weight=0.0,
            early_stopped=True,
            stage_costs=tuple(costs),
            distance=None,
            continuation_prob=a_prod,
        )

    summary = np.asarray(model.summarize(state), dtype=float)
    dist = float(model.distance(summary, model.observed_summary))
    if capture is not None:
        capture.summary[i] = summary
        if model.pilot_payload is not None:
            capture.payload[i] = model.pilot_payload(theta, state)
    ell = 1.0 if dist <= epsilon else 0.0
    weight = ell * u / a_prod
    return WeightedSample(
        theta=tuple(float(t) for t in theta),
        weight=weight,
        early_stopped=False,
        stage_costs=tuple(costs),
        distance=dist,
        continuation_prob=a_prod,
    )


def _run_staged(
    densities: DensityPair,
    n: int,
    model: StagedModel,
    epsilon: float,
    policy,
    base_seed: int,
    algorithm_id: str,
    *,
    workers: int = 1,
    cost_mode: str = "sim",
    failure_budget: int = 0,
    capture: Optional[_Capture] = None,
) -> SampleSet:
    if n < 1:
        raise ValueError("n must be at least 1")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    failures = [0]

    def one(i: int):
        try:
            return _staged_iteration(
                i, densities, model, epsilon, policy, base_seed, cost_mode, capture
            )
        except SimulationError as exc:
            failures[0] += 1
            logger.warning("%s", exc)
            if failures[0] > failure_budget:
                raise RunAborted(
                    f"simulation failure budget ({failure_budget}) exhausted: {exc}"
                ) from exc
            # A failed iteration contributes nothing but keeps its index.
            th = densities.sample_proposal(stream(base_seed, i, SLOT_THETA))
            return WeightedSample(
                theta=tuple(float(t) for t in th),
                weight=0.0,
                early_stopped=True,
                stage_costs=(),
                distance=None,
            )

    samples = _map_indices(n, one, workers)
    return SampleSet(
        samples=tuple(samples),
        epsilon=float(epsilon),
        base_seed=int(base_seed),
        algorithm_id=algorithm_id,
        cost_mode=cost_mode,
        model_id=model.model_id,
        data_id=model.data_id,
    )


# ---------------------------------------------------------------------------
# the three runners


def run_rw_is(
    densities: DensityPair,
    n: int,
    estimator: Callable[[np.ndarray, np.random.Generator], float],
    base_seed: int,
    *,
    workers: int = 1,
    cost_mode: str = "wall",
) -> SampleSet:
    """Importance sampling with a random likelihood estimate.

    ``estimator(theta, rng)`` must return a non-negative, finite
    realisation; the caller asserts it is unbiased for the likelihood.
    Weights are ``estimate * prior(theta) / proposal(theta)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    clock = _clock(cost_mode)

    def one(i: int) -> WeightedSample:
        theta = densities.sample_proposal(stream(base_seed, i, SLOT_THETA))
        u = densities.ratio(theta)
        rng = sim_stream(base_seed, i, 0)
        t0 = clock() if clock else None
        ell = float(estimator(theta, rng))
        cost = (clock() - t0) if clock else 0.0
        if not math.isfinite(ell) or ell < 0:
            raise ValueError(
                f"iteration {i}: likelihood estimate {ell!r} is negative or non-finite"
            )
        return WeightedSample(
            theta=tuple(float(t) for t in theta),
            weight=ell * u,
            early_stopped=False,
            stage_costs=(cost,),
            distance=None,
        )

    samples = _map_indices(n, one, workers)
    return SampleSet(
        samples=tuple(samples),
        epsilon=math.inf,
        base_seed=int(base_seed),
        algorithm_id=ALG_RW_IS,
        cost_mode=cost_mode,
    )


def run_abc_is(
    densities: DensityPair,
    n: int,
    model: StagedModel,
    epsilon: float,
    base_seed: int,
    *,
    workers: int = 1,
    cost_mode: str = "sim",
    failure_budget: int = 0,
) -> SampleSet:
    """Standard ABC importance sampling.

    Each iteration simulates the model fully and scores the indicator
    ``distance <= epsilon``; the weight is the indicator times
    prior/proposal.
    """
    return _run_staged(
        densities,
        n,
        model,
        epsilon,
        None,
        base_seed,
        ALG_ABC_IS,
        workers=workers,
        cost_mode=cost_mode,
        failure_budget=failure_budget,
    )


def run_lazy_abc(
    densities: DensityPair,
    n: int,
    model: StagedModel,
    epsilon: float,
    policy,
    base_seed: int,
    *,
    workers: int = 1,
    cost_mode: str = "sim",
    failure_budget: int = 0,
) -> SampleSet:
    """Early-stopping ABC importance sampling.

    At checkpoint ``k`` the decision statistic is evaluated and the
    iteration continues with probability ``policy.alpha(k, ...)``;
    otherwise it stops with weight zero.  Completed iterations divide
    the acceptance indicator by the product of continuation
    probabilities applied, so every conditional weight expectation
    matches ``run_abc_is``.  With the same ``base_seed``, parameter and
    simulation draws are identical to ``run_abc_is``; stop coins come
    from a dedicated sub-stream.
    """
    if model.n_checkpoints < 1:
        raise ValueError("lazy runs need a model with at least one checkpoint")
    return _run_staged(
        densities,
        n,
        model,
        epsilon,
        policy,
        base_seed,
        ALG_LAZY_ABC,
        workers=workers,
        cost_mode=cost_mode,
        failure_budget=failure_budget,
    )


# ---------------------------------------------------------------------------
# estimators on sample sets


def ess(sample_set: SampleSet) -> float:
    """Effective sample size ``n * mean(w)^2 / mean(w^2)``."""
    w = sample_set.weights()
    m2 = float((w * w).mean())
    if m2 == 0.0:
        raise DegenerateSampleError("degenerate sample: all weights are zero")
    m1 = float(w.mean())
    return len(w) * m1 * m1 / m2


def posterior_estimate(sample_set: SampleSet, h: Callable[[np.ndarray], float]) -> float:
    """Self-normalised estimate of the posterior expectation of ``h``."""
    w = sample_set.weights()
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateSampleError("degenerate sample: all weights are zero")
    vals = np.array([h(np.asarray(s.theta)) for s in sample_set.samples], dtype=float)
    return float((vals * w).sum() / total)


def posterior_mean_sd(sample_set: SampleSet, component: int = 0) -> tuple[float, float]:
    """Weighted mean and standard deviation of one parameter component."""
    mean = posterior_estimate(sample_set, lambda t: float(t[component]))
    second = posterior_estimate(sample_set, lambda t: float(t[component]) ** 2)
    var = max(second - mean * mean, 0.0)
    return mean, math.sqrt(var)


def evidence_estimate(sample_set: SampleSet) -> float:
    """Mean weight: unbiased for the normalising constant of the target."""
    if sample_set.n_iterations == 0:
        return 0.0
    return float(sample_set.weights().mean())


def posthoc_epsilon(sample_set: SampleSet, new_epsilon: float) -> SampleSet:
    """Re-threshold a completed run at a smaller ``epsilon``.

    Zeroes the weight of every sample whose realised distance exceeds
    ``new_epsilon`` and leaves all others untouched.  Increasing
    ``epsilon`` is rejected: weights from the wider threshold were
    never computed, and retrospectively enlarging the acceptance region
    can introduce large weights that destabilise the importance
    sampling approximation.
    """
    if new_epsilon > sample_set.epsilon:
        raise ValueError(
            f"new epsilon {new_epsilon!r} exceeds the run value "
            f"{sample_set.epsilon!r}; raising the threshold after the fact can "
            "introduce large weights and destabilise the approximation"
        )
    new_samples = []
    for s in sample_set.samples:
        if not s.early_stopped and s.distance is None:
            raise ValueError("completed sample lacks a distance; cannot re-threshold")
        if s.weight > 0.0 and s.distance > new_epsilon:
            s = replace(s, weight=0.0)
        new_samples.append(s)
    return replace(sample_set, samples=tuple(new_samples), epsilon=float(new_epsilon))


def posthoc_target_acceptances(sample_set: SampleSet, count: int) -> SampleSet:
    """Re-threshold so that exactly ``count`` samples stay accepted.

    The kept samples are the first ``count`` positive-weight samples
    ordered by distance then by iteration index, so ties at the cut
    distance resolve deterministically.
    """
    candidates = [
        (s.distance, i)
        for i, s in enumerate(sample_set.samples)
        if s.weight > 0.0
    ]
    if count < 1 or count > len(candidates):
        raise ValueError(
            f"cannot keep {count} acceptances; run has {len(candidates)}"
        )
    candidates.sort()
    keep = {i for _, i in candidates[:count]}
    cut = candidates[count - 1][0]
    new_samples = tuple(
        replace(s, weight=0.0) if (s.weight > 0.0 and i not in keep) else s
        for i, s in enumerate(sample_set.samples)
    )
    return replace(sample_set, samples=new_samples, epsilon=float(cut))


def combine(pilot_set: SampleSet, main_set: SampleSet) -> SampleSet:
    """Concatenate a pilot run with a main run into one sample set.

    Both runs must target the same threshold, observed data and model.
    No reweighting constant is applied to either sequence.
    """
    if pilot_set.n_iterations == 0:
        return main_set
    if pilot_set.epsilon != main_set.epsilon:
        raise ValueError(
            f"epsilon mismatch: {pilot_set.epsilon!r} vs {main_set.epsilon!r}"
        )
    for attr in ("model_id", "data_id"):
        a, b = getattr(pilot_set, attr), getattr(main_set, attr)
        if a and b and a != b:
            raise ValueError(f"{attr} mismatch: {a!r} vs {b!r}")
    if pilot_set.cost_mode != main_set.cost_mode:
        raise ValueError("cost modes differ; totals would not be comparable")
    return replace(main_set, samples=pilot_set.samples + main_set.samples)


# ---------------------------------------------------------------------------
# persistence: CSV of samples plus a JSON sidecar

_SAMPLES_FILE = "samples.csv"
_META_FILE = "meta.json"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_sample_set(sample_set: SampleSet, directory: str) -> None:
    """Write ``samples.csv`` and ``meta.json`` under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    p = len(sample_set.samples[0].theta) if sample_set.samples else 0
    k = max((len(s.stage_costs) for s in sample_set.samples), default=0)
    header = (
        ["index"]
        + [f"theta_{j}" for j in range(p)]
        + ["weight", "early_stopped"]
        + [f"stage_cost_{j}" for j in range(k)]
        + ["distance", "continuation_prob"]
    )
    with open(os.path.join(directory, _SAMPLES_FILE), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, s in enumerate(sample_set.samples):
            costs = [_fmt(c) for c in s.stage_costs] + [""] * (k - len(s.stage_costs))
            writer.writerow(
                [i]
                + [_fmt(t) for t in s.theta]
                + [_fmt(s.weight), "true" if s.early_stopped else "false"]
                + costs
                + ["" if s.distance is None else _fmt(s.distance), _fmt(s.continuation_prob)]
            )
    meta = {
        "epsilon": sample_set.epsilon,
        "base_seed": sample_set.base_seed,
        "algorithm_id": sample_set.algorithm_id,
        "cost_mode": sample_set.cost_mode,
        "model_id": sample_set.model_id,
        "data_id": sample_set.data_id,
        "n_iterations": sample_set.n_iterations,
        "total_cost": sample_set.total_cost,
        "theta_dim": p,
    }
    with open(os.path.join(directory, _META_FILE), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_sample_set(directory: str) -> SampleSet:
    """Inverse of :func:`save_sample_set`; bit-exact round trip."""
    with open(os.path.join(directory, _META_FILE)) as fh:
        meta = json.load(fh)
    p = int(meta["theta_dim"])
    samples = []
    with open(os.path.join(directory, _SAMPLES_FILE), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = sum(1 for h in header if h.startswith("stage_cost_"))
        for row in reader:
            theta = tuple(float(v) for v in row[1 : 1 + p])
            weight = float(row[1 + p])
            early = row[2 + p] == "true"
            costs = tuple(float(v) for v in row[3 + p : 3 + p + k] if v != "")
            dist_str = row[3 + p + k]
            dist = None if dist_str == "" else float(dist_str)
            cont = float(row[4 + p + k])
            samples.append(
                WeightedSample(theta, weight, early, costs, dist, cont)
            )
    sset = SampleSet(
        samples=tuple(samples),
        epsilon=float(meta["epsilon"]),
        base_seed=int(meta["base_seed"]),
        algorithm_id=meta["algorithm_id"],
        cost_mode=meta.get("cost_mode", "sim"),
        model_id=meta.get("model_id", ""),
        data_id=meta.get("data_id", ""),
    )
    if sset.n_iterations != int(meta["n_iterations"]):
        raise ValueError("sample count does not match metadata")
    return sset
