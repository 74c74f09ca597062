"""Pilot runs and construction of continuation-probability policies.

The pipeline: run a pilot of standard iterations recording decision
statistics, stage costs, summaries and distances; estimate the
acceptance probability ``gamma(phi)`` and the expected remaining cost
``t2(phi)``; then choose the scale ``lambda`` of the policy

    alpha(phi) = min{1, lambda * u(phi) * sqrt(gamma(phi) / t2(phi))}

by numerically maximising an efficiency estimate computed on the pilot
record (effective sample size per unit cost, up to a constant).  Two
gamma estimators are provided: a "standard" one that models the
relationship between the decision statistic and the realised distance,
and a "conservative" one that smooths acceptance indicators at an
enlarged threshold and therefore errs towards continuing.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import binom as binom_dist

from .distributions import DensityPair
from .sampler import SampleSet, _Capture, _run_staged, ALG_ABC_IS
from .smoothers import (
    Smoother,
    fit_binomial_mean,
    fit_kernel_logistic,
    fit_positive_mean,
    fit_tail_prob_boxcox,
    make_constant,
)
from .staged import StagedModel

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_FLOOR = 1e-3


class TuningError(RuntimeError):
    pass


class ConditionC3Error(TuningError):
    """The weight ratio is not recoverable from the decision statistics."""


# ---------------------------------------------------------------------------
# pilot record


@dataclass(frozen=True, eq=False)
class PilotRecord:
    """Per-iteration log of a pilot run.

    ``phi`` maps checkpoint keys (``"cp0"``, ``"cp1"``, ...) to scalar
    decision-statistic columns; ``stage_costs`` has one column per
    model stage; ``aux`` holds optional model-specific payloads used to
    re-evaluate alternative decision statistics.
    """

    theta: np.ndarray  # (n, p)
    u: np.ndarray  # (n,)
    phi: dict
    stage_costs: np.ndarray  # (n, n_stages)
    distance: np.ndarray  # (n,)
    summary: np.ndarray  # (n, m)
    aux: dict = field(default_factory=dict)
    epsilon: float = math.inf
    base_seed: int = 0
    model_id: str = ""
    data_id: str = ""
    cost_mode: str = "sim"

    def __post_init__(self):
        if np.any(self.u <= 0):
            raise ValueError("weight ratios must be positive on the proposal support")
        if np.any(self.stage_costs < 0):
            raise ValueError("stage costs must be non-negative")

    @property
    def n(self) -> int:
        return len(self.u)

    @property
    def n_checkpoints(self) -> int:
        return self.stage_costs.shape[1] - 1

    def checkpoint_of(self, phi_key: str) -> int:
        if not phi_key.startswith("cp"):
            raise KeyError(f"unknown decision statistic {phi_key!r}")
        return int(phi_key[2:])

    def cost_before(self, checkpoint: int) -> np.ndarray:
        return self.stage_costs[:, : checkpoint + 1].sum(axis=1)

    def cost_after(self, checkpoint: int) -> np.ndarray:
        return self.stage_costs[:, checkpoint + 1 :].sum(axis=1)

    def acceptance(self, epsilon: float) -> np.ndarray:
        return self.distance <= epsilon

    def epsilon_for_acceptances(self, count: int) -> float:
        """Distance order statistic giving exactly ``count`` acceptances
        (ties broken by distance order)."""
        if not (1 <= count <= self.n):
            raise ValueError("acceptance count out of range")
        return float(np.sort(self.distance)[count - 1])


def run_pilot(
    densities: DensityPair,
    model: StagedModel,
    n_pilot: int,
    base_seed: int,
    *,
    epsilon: float = math.inf,
    workers: int = 1,
    cost_mode: str = "sim",
    min_iterations: int = 100,
) -> tuple[SampleSet, PilotRecord]:
    """Standard run of ``n_pilot`` iterations with full capture.

    The returned sample set can later be re-thresholded and appended to
    a main run; the record feeds the tuning estimators.
    """
    if n_pilot < min_iterations:
        raise ValueError(f"pilot needs at least {min_iterations} iterations")
    capture = _Capture(n_pilot, model)
    sset = _run_staged(
        densities,
        n_pilot,
        model,
        epsilon,
        None,
        base_seed,
        ALG_ABC_IS,
        workers=workers,
        cost_mode=cost_mode,
        capture=capture,
    )
    theta = sset.thetas()
    u = np.array([densities.ratio(t) for t in theta])
    phi = {}
    for k in range(model.n_checkpoints):
        col = np.array([np.asarray(v, dtype=float).ravel() for v in capture.phi[k]])
        phi[f"cp{k}"] = col[:, 0] if col.shape[1] == 1 else col
    n_stages = model.n_stages
    costs = np.zeros((n_pilot, n_stages))
    for i, s in enumerate(sset.samples):
        costs[i, : len(s.stage_costs)] = s.stage_costs
    summary = np.array([np.asarray(s, dtype=float).ravel() for s in capture.summary])
    aux = {}
    if capture.payload[0] is not None:
        for key in capture.payload[0]:
            aux[key] = np.array(
                [np.asarray(p[key], dtype=float).ravel() for p in capture.payload]
            )
    record = PilotRecord(
        theta=theta,
        u=u,
        phi=phi,
        stage_costs=costs,
        distance=sset.distances(),
        summary=summary,
        aux=aux,
        epsilon=float(epsilon),
        base_seed=int(base_seed),
        model_id=model.model_id,
        data_id=model.data_id,
        cost_mode=cost_mode,
    )
    return sset, record


# ---------------------------------------------------------------------------
# continuation-probability policies


def _clamp(value: float, floor: float) -> float:
    if not math.isfinite(value):
        return 1.0 if value > 0 else floor
    return min(1.0, max(floor, value))


@dataclass(frozen=True, eq=False)
class AlphaPolicy:
    """Per-checkpoint continuation probabilities.

    Each checkpoint function maps ``(phi, u, history)`` to a raw
    probability; outputs are clamped to ``[alpha_floor, 1]`` so a
    vanishing estimate can never make acceptance unreachable.
    ``history`` carries the decision statistics of earlier checkpoints.
    """

    checkpoint_fns: tuple
    alpha_floor: float = DEFAULT_ALPHA_FLOOR
    provenance: str = "ad-hoc"
    lambdas: tuple = ()
    phi_keys: tuple = ()
    meta: dict = field(default_factory=dict)

    def alpha(self, k: int, phi, u: float, history=()) -> float:
        raw = float(self.checkpoint_fns[k](np.atleast_1d(phi), u, history))
        return _clamp(raw, self.alpha_floor)

    def alpha_on_record(self, record: PilotRecord) -> np.ndarray:
        """Evaluate all checkpoint probabilities on a pilot record."""
        n, k_rec = record.n, record.n_checkpoints
        out = np.ones((n, k_rec))
        keys = self.phi_keys or tuple(f"cp{k}" for k in range(k_rec))
        for i in range(n):
            history = []
            for k in range(k_rec):
                phi_i = np.atleast_1d(record.phi[keys[k]][i])
                if k < len(self.checkpoint_fns):
                    out[i, k] = self.alpha(k, phi_i, float(record.u[i]), tuple(history))
                history.append(phi_i)
        return out

    @classmethod
    def constant(
        cls, value: float = 1.0, n_checkpoints: int = 1, alpha_floor: float = DEFAULT_ALPHA_FLOOR
    ) -> "AlphaPolicy":
        fns = tuple(lambda phi, u, hist, v=value: v for _ in range(n_checkpoints))
        return cls(fns, alpha_floor=alpha_floor, provenance="constant")

    @classmethod
    def from_table(
        cls,
        entries: Sequence[tuple[float, float]],
        default: float = 1.0,
        n_checkpoints: int = 1,
        at_checkpoint: int = 0,
        alpha_floor: float = DEFAULT_ALPHA_FLOOR,
    ) -> "AlphaPolicy":
        """Step-table policy on a scalar statistic.

        ``entries`` is a list of ``(threshold, alpha)`` pairs: the first
        threshold with ``phi <= threshold`` decides; else ``default``.
        """
        table = sorted((float(t), float(a)) for t, a in entries)

        def lookup(phi, u, hist):
            x = float(phi[0])
            for threshold, a in table:
                if x <= threshold:
                    return a
            return default

        fns = [
            (lookup if k == at_checkpoint else (lambda phi, u, hist: 1.0))
            for k in range(n_checkpoints)
        ]
        return cls(
            tuple(fns),
            alpha_floor=alpha_floor,
            provenance="ad-hoc",
            meta={"table": table, "default": default, "at_checkpoint": at_checkpoint},
        )


# ---------------------------------------------------------------------------
# estimation of t2 and gamma


def estimate_t2(record: PilotRecord, phi_key: str, mode: str = "constant") -> Smoother:
    """Expected remaining cost after a checkpoint, as a smoother.

    ``constant`` returns the pilot mean; ``regression`` fits the
    log-link kernel regression on the decision statistic.
    """
    k = record.checkpoint_of(phi_key)
    t2 = record.cost_after(k)
    phi = record.phi[phi_key]
    if mode == "constant":
        rng_lo, rng_hi = float(np.min(phi)), float(np.max(phi))
        return make_constant(float(t2.mean()), "log-link mean", (rng_lo, rng_hi))
    if mode == "regression":
        return fit_positive_mean(phi, t2)
    raise ValueError(f"unknown t2 mode {mode!r}")


def _binomial_band_prob(p: np.ndarray, trials: int, observed: int, epsilon: float):
    k_lo = max(0, math.ceil(observed - epsilon))
    k_hi = min(trials, math.floor(observed + epsilon))
    if k_lo > k_hi:
        return np.zeros_like(p)
    lower = binom_dist.cdf(k_lo - 1, trials, p) if k_lo > 0 else 0.0
    return binom_dist.cdf(k_hi, trials, p) - lower


def gamma_standard(
    record: PilotRecord,
    phi_key: str,
    epsilon: float,
    hooks: Optional[dict] = None,
) -> Smoother:
    """Acceptance-probability estimate by direct modelling.

    Two routes, chosen by the model-supplied ``hooks``:

    * ``binomial-summary``: smooth the per-trial success probability of
      a count summary, then sum the exact binomial band probability
      around the observed count.
    * ``boxcox`` (default): windowed transformed regression of the
      realised distance on the decision statistic (optionally with the
      log weight ratio as covariate).
    """
    hooks = dict(hooks or {})
    method = hooks.pop("method", "boxcox")
    phi = record.phi[phi_key]
    if method == "binomial-summary":
        trials = int(hooks["trials"])
        observed = int(hooks["observed"])
        component = int(hooks.get("summary_component", 0))
        successes = record.summary[:, component]
        p_hat = fit_binomial_mean(phi, successes, trials)

        def evaluate(xq, extra=None):
            p = np.asarray(p_hat(xq), dtype=float)
            return np.clip(_binomial_band_prob(p, trials, observed, epsilon), 0.0, 1.0)

        return Smoother(
            kind="acceptance-prob",
            x_min=p_hat.x_min,
            x_max=p_hat.x_max,
            evaluate=evaluate,
            bandwidth=p_hat.bandwidth,
            meta={"method": method, "component_smoother": p_hat},
        )
    if method == "boxcox":
        extra = np.log(record.u) if hooks.pop("include_log_u", False) else None
        smoother = fit_tail_prob_boxcox(
            phi, record.distance, epsilon, extra_covariate=extra, **hooks
        )
        if smoother.meta.get("degenerate"):
            logger.warning(
                "pilot distances are constant; acceptance-probability estimate "
                "degrades to a constant"
            )
        return smoother
    raise ValueError(f"unknown gamma estimation method {method!r}")


def gamma_conservative(
    record: PilotRecord,
    phi_key: str,
    epsilon1: float,
    min_acceptances: int = 30,
) -> Smoother:
    """Acceptance-probability estimate from indicators at an enlarged
    threshold; higher than the target-threshold probability wherever
    the fit is calibrated, hence safe against huge weights."""
    z = record.acceptance(epsilon1).astype(float)
    if z.sum() < min_acceptances:
        adjusted = record.epsilon_for_acceptances(min_acceptances)
        logger.warning(
            "threshold %.6g gives only %d pilot acceptances; raising to %.6g",
            epsilon1,
            int(z.sum()),
            adjusted,
        )
        epsilon1 = adjusted
        z = record.acceptance(epsilon1).astype(float)
    smoother = fit_kernel_logistic(record.phi[phi_key], z)
    smoother.meta["epsilon1"] = float(epsilon1)
    return smoother


# ---------------------------------------------------------------------------
# efficiency estimation and the scale search


@dataclass(frozen=True)
class EfficiencyEstimate:
    w2_hat: float
    t_hat: float
    score: float
    score_standard: float
    relative: float


def _efficiency_terms(
    u: np.ndarray, gamma: np.ndarray, alphas: np.ndarray, stage_costs: np.ndarray
):
    prod = np.cumprod(alphas, axis=1)
    w2 = float((u * u * gamma / prod[:, -1]).mean())
    t = float(stage_costs[:, 0].sum())
    for k in range(alphas.shape[1]):
        t += float((prod[:, k] * stage_costs[:, k + 1]).sum())
    return w2, t


def efficiency_estimate(
    record: PilotRecord, policy: AlphaPolicy, gamma_hat
) -> EfficiencyEstimate:
    """Estimated efficiency (up to a constant) of a policy on a pilot
    record, and its ratio to the always-continue baseline."""
    gamma = np.asarray(gamma_hat, dtype=float)
    if gamma.shape != (record.n,):
        raise ValueError("gamma_hat must hold one estimate per pilot iteration")
    alphas = policy.alpha_on_record(record)
    if np.any(alphas < policy.alpha_floor - 1e-12):
        raise TuningError("policy produced a continuation probability below its floor")
    w2, t = _efficiency_terms(record.u, gamma, alphas, record.stage_costs)
    ones = np.ones_like(alphas)
    w2_std, t_std = _efficiency_terms(record.u, gamma, ones, record.stage_costs)
    score = 1.0 / (w2 * t)
    score_std = 1.0 / (w2_std * t_std)
    return EfficiencyEstimate(w2, t, score, score_std, score / score_std)


def _gamma_values(gamma_hat, phi: np.ndarray, u: np.ndarray) -> np.ndarray:
    if isinstance(gamma_hat, Smoother):
        if gamma_hat.meta.get("uses_covariate"):
            return np.array(
                [float(gamma_hat(p, extra=math.log(ui))) for p, ui in zip(phi, u)]
            )
        return np.asarray(gamma_hat(phi), dtype=float)
    if callable(gamma_hat):
        return np.asarray(gamma_hat(phi), dtype=float)
    return np.asarray(gamma_hat, dtype=float)


def _t2_values(t2_hat, phi: np.ndarray) -> np.ndarray:
    if isinstance(t2_hat, Smoother) or callable(t2_hat):
        return np.asarray(t2_hat(phi), dtype=float)
    arr = np.asarray(t2_hat, dtype=float)
    if arr.ndim == 0:
        return np.full(len(phi), float(arr))
    return arr


def _alpha_base(u: np.ndarray, gamma: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Raw policy shape u * sqrt(gamma / t2); infinite when there is no
    remaining cost (clipping then yields alpha = 1)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(t2 > 0, gamma / np.where(t2 > 0, t2, 1.0), np.inf)
        base = u * np.sqrt(ratio)
    base[(gamma <= 0) & ~(t2 > 0)] = np.inf
    return base


def check_c3(record: PilotRecord, u_of_phi=None, phi_includes_theta: bool = False):
    """Structural check that the weight ratio is a function of the
    decision statistics: rejection sampling, an explicit map, or the
    parameters included in the statistics."""
    if u_of_phi is not None or phi_includes_theta:
        return
    if np.allclose(record.u, 1.0):
        return
    raise ConditionC3Error(
        "the prior/proposal ratio varies but is not recoverable from the "
        "decision statistics; append the ratio (or the parameters) to the "
        "decision statistics, or pass u_of_phi"
    )


def _golden_max(fn, lo: float, hi: float, iters: int = 80) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def _single_stop_score(
    lam: float,
    base: np.ndarray,
    u: np.ndarray,
    gamma: np.ndarray,
    t1: np.ndarray,
    t2: np.ndarray,
    floor: float,
) -> float:
    alpha = np.clip(lam * base, floor, 1.0)
    w2 = float((u * u * gamma / alpha).mean())
    t = float(t1.sum() + (alpha * t2).sum())
    return 1.0 / (w2 * t)


def _optimize_lambda_arrays(
    base: np.ndarray,
    u: np.ndarray,
    gamma: np.ndarray,
    t1: np.ndarray,
    t2: np.ndarray,
    floor: float,
    lambda_grid: Optional[np.ndarray] = None,
):
    grid = (
        np.geomspace(1e-4, 1e4, 41) if lambda_grid is None else np.asarray(lambda_grid)
    )
    scores = np.array(
        [_single_stop_score(l, base, u, gamma, t1, t2, floor) for l in grid]
    )
    if not np.all(np.isfinite(scores)):
        raise TuningError(
            "efficiency estimate is non-finite on the scale grid; "
            f"scores={scores.tolist()}"
        )
    j = int(np.argmax(scores))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, len(grid) - 1)]
    log_star = _golden_max(
        lambda ll: _single_stop_score(math.exp(ll), base, u, gamma, t1, t2, floor),
        math.log(lo),
        math.log(hi),
    )
    lam = math.exp(log_star)
    if _single_stop_score(lam, base, u, gamma, t1, t2, floor) < scores[j]:
        lam = float(grid[j])
    return lam


def optimize_lambda(
    record: PilotRecord,
    gamma_hat,
    t2_hat,
    u_of_phi=None,
    *,
    phi_key: str = "cp0",
    alpha_floor: float = DEFAULT_ALPHA_FLOOR,
    phi_includes_theta: bool = False,
    n_checkpoints: Optional[int] = None,
) -> tuple[float, AlphaPolicy]:
    """Choose the policy scale by maximising estimated efficiency.

    Grid search on a log scale refined by golden section.  Returns the
    scale and the fitted policy ``min{1, lambda*u*sqrt(gamma/t2)}``
    placed at the checkpoint of ``phi_key`` (other checkpoints always
    continue).
    """
    check_c3(record, u_of_phi, phi_includes_theta)
    k = record.checkpoint_of(phi_key)
    phi = record.phi[phi_key]
    gamma = _gamma_values(gamma_hat, phi, record.u)
    t2 = _t2_values(t2_hat, phi)
    t1 = record.cost_before(k)
    t2_cost = record.cost_after(k)
    base = _alpha_base(record.u, gamma, t2)
    lam = _optimize_lambda_arrays(
        base, record.u, gamma, t1, t2_cost, alpha_floor
    )
    n_cps = record.n_checkpoints if n_checkpoints is None else n_checkpoints

    gamma_fn = gamma_hat if (isinstance(gamma_hat, Smoother) or callable(gamma_hat)) else None
    t2_fn = t2_hat if (isinstance(t2_hat, Smoother) or callable(t2_hat)) else None
    if gamma_fn is None or t2_fn is None:
        raise TuningError(
            "building a reusable policy requires gamma_hat and t2_hat to be "
            "evaluable functions (smoothers)"
        )
    uses_cov = isinstance(gamma_fn, Smoother) and gamma_fn.meta.get("uses_covariate")

    def policy_fn(phi_vec, u, history):
        x = float(phi_vec[0])
        g = float(gamma_fn(x, extra=math.log(u)) if uses_cov else gamma_fn(x))
        t2v = float(t2_fn(x))
        if t2v <= 0:
            return 1.0
        return lam * u * math.sqrt(max(g, 0.0) / t2v)

    fns = [
        (policy_fn if j == k else (lambda phi_vec, u, history: 1.0))
        for j in range(n_cps)
    ]
    policy = AlphaPolicy(
        tuple(fns),
        alpha_floor=alpha_floor,
        provenance="standard",
        lambdas=(lam,),
        phi_keys=tuple(f"cp{j}" for j in range(n_cps)),
        meta={"active_checkpoint": k, "phi_key": phi_key},
    )
    return lam, policy


def tune_single(
    record: PilotRecord,
    phi_key: str,
    epsilon: float,
    *,
    gamma_mode: str = "standard",
    gamma_hooks: Optional[dict] = None,
    epsilon1: Optional[float] = None,
    min_acceptances: int = 30,
    t2_mode: str = "constant",
    alpha_floor: float = DEFAULT_ALPHA_FLOOR,
    u_of_phi=None,
    phi_includes_theta: bool = False,
) -> TuningReport:
    """Fit gamma and t2 for one decision statistic, optimise the policy
    scale and assemble a full tuning report."""
    if gamma_mode == "standard":
        gamma_sm = gamma_standard(record, phi_key, epsilon, gamma_hooks)
    elif gamma_mode == "conservative":
        eps1 = epsilon1 if epsilon1 is not None else epsilon
        gamma_sm = gamma_conservative(record, phi_key, eps1, min_acceptances)
    else:
        raise ValueError(f"unknown gamma mode {gamma_mode!r}")
    t2_sm = estimate_t2(record, phi_key, t2_mode)
    lam, policy = optimize_lambda(
        record,
        gamma_sm,
        t2_sm,
        u_of_phi,
        phi_key=phi_key,
        alpha_floor=alpha_floor,
        phi_includes_theta=phi_includes_theta,
    )
    gamma_rows = _gamma_values(gamma_sm, record.phi[phi_key], record.u)
    est = efficiency_estimate(record, policy, gamma_rows)
    at_k = record.checkpoint_of(phi_key)
    phi = record.phi[phi_key]
    grid = np.linspace(float(phi.min()), float(phi.max()), 201)
    curves = {
        "phi": grid.tolist(),
        "gamma": np.asarray(gamma_sm(grid), dtype=float).tolist(),
        "t2": np.asarray(t2_sm(grid), dtype=float).tolist(),
        "alpha": [policy.alpha(at_k, np.array([x]), 1.0, ()) for x in grid],
    }
    recommendation = "lazy" if est.relative > 1.0 else "standard-abc"
    spec = policy_spec_from_policy_fns(policy, record, at_k, phi)
    return TuningReport(
        chosen={"kind": "phi-key", "key": phi_key},
        lambda_star=lam,
        score=est.score,
        relative=est.relative,
        w2_hat=est.w2_hat,
        t_hat=est.t_hat,
        recommendation=recommendation,
        table=[
            {
                "label": phi_key,
                "lambda": lam,
                "score": est.score,
                "relative_efficiency_estimate": est.relative,
                "w2_hat": est.w2_hat,
                "t_hat": est.t_hat,
            }
        ],
        policy=policy,
        policy_spec=spec,
        curves=curves,
        alpha_floor=alpha_floor,
        gamma_mode=gamma_mode,
        epsilon=epsilon,
    )


# ---------------------------------------------------------------------------
# configuration selection


@dataclass(frozen=True, eq=False)
class LocationSearch:
    """Backwards-selection domain over subsets of an index set.

    ``candidate(subset)`` must return ``{"phi", "t1", "t2"}`` arrays
    aligned with the pilot record.
    """

    full_set: tuple
    candidate: Callable[[tuple], dict]
    min_size: int = 3


@dataclass(eq=False)
class TuningReport:
    chosen: dict
    lambda_star: Optional[float]
    score: float
    relative: float
    w2_hat: float
    t_hat: float
    recommendation: str
    table: list
    policy: Optional[AlphaPolicy]
    policy_spec: Optional[list]
    curves: dict
    alpha_floor: float
    gamma_mode: str
    epsilon: float

    def to_json(self, path: str) -> None:
        payload = {
            "chosen": self.chosen,
            "lambda_star": self.lambda_star,
            "score": self.score,
            "relative_efficiency_estimate": self.relative,
            "w2_hat": self.w2_hat,
            "t_hat": self.t_hat,
            "recommendation": self.recommendation,
            "table": self.table,
            "policy_spec": self.policy_spec,
            "curves": self.curves,
            "alpha_floor": self.alpha_floor,
            "gamma_mode": self.gamma_mode,
            "epsilon": self.epsilon,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str) -> "TuningReport":
        with open(path) as fh:
            payload = json.load(fh)
        policy = None
        if payload.get("policy_spec"):
            policy = policy_from_spec(payload["policy_spec"], payload["alpha_floor"])
        return cls(
            chosen=payload["chosen"],
            lambda_star=payload["lambda_star"],
            score=payload["score"],
            relative=payload["relative_efficiency_estimate"],
            w2_hat=payload["w2_hat"],
            t_hat=payload["t_hat"],
            recommendation=payload["recommendation"],
            table=payload["table"],
            policy=policy,
            policy_spec=payload["policy_spec"],
            curves=payload["curves"],
            alpha_floor=payload["alpha_floor"],
            gamma_mode=payload["gamma_mode"],
            epsilon=payload["epsilon"],
        )


def policy_from_spec(spec: list, alpha_floor: float) -> AlphaPolicy:
    fns = []
    for entry in spec:
        kind = entry["kind"]
        if kind == "constant":
            value = float(entry["value"])
            fns.append(lambda phi, u, hist, v=value: v)
        elif kind == "table":
            table = [(float(t), float(a)) for t, a in entry["entries"]]
            default = float(entry.get("default", 1.0))

            def lookup(phi, u, hist, table=table, default=default):
                x = float(phi[0])
                for threshold, a in table:
                    if x <= threshold:
                        return a
                return default

            fns.append(lookup)
        elif kind == "levels":
            levels = np.asarray(entry["levels"], dtype=float)
            alphas = np.asarray(entry["alphas"], dtype=float)

            def level_fn(phi, u, hist, levels=levels, alphas=alphas):
                return float(alphas[int(np.argmin(np.abs(levels - float(phi[0]))))])

            fns.append(level_fn)
        elif kind == "grid":
            grid = np.asarray(entry["phi"], dtype=float)
            base = np.asarray(entry["base"], dtype=float)
            use_u = bool(entry.get("use_u", True))

            def grid_fn(phi, u, hist, grid=grid, base=base, use_u=use_u):
                b = float(np.interp(float(phi[0]), grid, base))
                return b * (u if use_u else 1.0)

            fns.append(grid_fn)
        else:
            raise ValueError(f"unknown policy spec kind {kind!r}")
    return AlphaPolicy(tuple(fns), alpha_floor=alpha_floor, provenance="from-spec")


def _fit_gamma_for_arrays(
    phi: np.ndarray,
    record: PilotRecord,
    epsilon: float,
    gamma_mode: str,
    gamma_hooks: Optional[dict],
    epsilon1: Optional[float],
    min_acceptances: int,
) -> Smoother:
    if gamma_mode == "standard":
        hooks = dict(gamma_hooks or {})
        method = hooks.pop("method", "boxcox")
        if method == "boxcox":
            extra = np.log(record.u) if hooks.pop("include_log_u", False) else None
            return fit_tail_prob_boxcox(
                phi, record.distance, epsilon, extra_covariate=extra, **hooks
            )
        raise TuningError(
            "subset candidates support only the generic distance-regression route"
        )
    if gamma_mode == "conservative":
        eps1 = epsilon1 if epsilon1 is not None else epsilon
        z = (record.distance <= eps1).astype(float)
        if z.sum() < min_acceptances:
            eps1 = float(np.sort(record.distance)[min_acceptances - 1])
            z = (record.distance <= eps1).astype(float)
        sm = fit_kernel_logistic(phi, z)
        sm.meta["epsilon1"] = float(eps1)
        return sm
    raise ValueError(f"unknown gamma mode {gamma_mode!r}")


def select_configuration(
    record: PilotRecord,
    candidate_phi_keys: Sequence[str] = (),
    location_search: Optional[LocationSearch] = None,
    *,
    epsilon: float,
    gamma_mode: str = "standard",
    gamma_hooks: Optional[dict] = None,
    epsilon1: Optional[float] = None,
    min_acceptances: int = 30,
    t2_mode: str = "constant",
    alpha_floor: float = DEFAULT_ALPHA_FLOOR,
    u_of_phi=None,
    phi_includes_theta: bool = False,
) -> TuningReport:
    """Evaluate candidate decision statistics (and, optionally, initial
    location subsets by greedy backwards selection) and return the best
    configuration with its fitted policy.

    Falls back to recommending the standard algorithm when no candidate
    beats it in estimated efficiency.
    """
    check_c3(record, u_of_phi, phi_includes_theta)
    table = []
    evaluated = {}

    def evaluate(label, phi, t1, t2_cost, chosen_info):
        gamma_sm = _fit_gamma_for_arrays(
            phi, record, epsilon, gamma_mode, gamma_hooks, epsilon1, min_acceptances
        )
        gamma = _gamma_values(gamma_sm, phi, record.u)
        if t2_mode == "constant":
            t2_sm = make_constant(
                float(np.mean(t2_cost)), "log-link mean", (float(phi.min()), float(phi.max()))
            )
        else:
            t2_sm = fit_positive_mean(phi, t2_cost)
        t2 = _t2_values(t2_sm, phi)
        base = _alpha_base(record.u, gamma, t2)
        lam = _optimize_lambda_arrays(base, record.u, gamma, t1, t2_cost, alpha_floor)
        alpha = np.clip(lam * base, alpha_floor, 1.0)
        w2 = float((record.u ** 2 * gamma / alpha).mean())
        t_total = float(t1.sum() + (alpha * t2_cost).sum())
        score = 1.0 / (w2 * t_total)
        w2_std = float((record.u ** 2 * gamma).mean())
        t_std = float(t1.sum() + t2_cost.sum())
        rel = score * (w2_std * t_std)
        entry = {
            "label": label,
            "lambda": lam,
            "score": score,
            "relative_efficiency_estimate": rel,
            "w2_hat": w2,
            "t_hat": t_total,
        }
        table.append(entry)
        evaluated[label] = {
            "entry": entry,
            "phi": phi,
            "gamma_sm": gamma_sm,
            "t2_sm": t2_sm,
            "lam": lam,
            "chosen_info": chosen_info,
        }
        return entry

    for key in candidate_phi_keys:
        phi = np.asarray(record.phi[key], dtype=float)
        if phi.ndim != 1:
            raise TuningError(f"decision statistic {key!r} is not scalar")
        k = record.checkpoint_of(key)
        evaluate(key, phi, record.cost_before(k), record.cost_after(k),
                 {"kind": "phi-key", "key": key})

    if location_search is not None:
        current = tuple(location_search.full_set)
        cand = location_search.candidate(current)
        best_entry = evaluate(
            f"subset-{current}", cand["phi"], cand["t1"], cand["t2"],
            {"kind": "subset", "subset": list(current)},
        )
        improved = True
        while improved and len(current) > location_search.min_size:
            improved = False
            best_drop = None
            for drop in current:
                subset = tuple(i for i in current if i != drop)
                cand = location_search.candidate(subset)
                entry = evaluate(
                    f"subset-{subset}", cand["phi"], cand["t1"], cand["t2"],
                    {"kind": "subset", "subset": list(subset)},
                )
                if entry["score"] > best_entry["score"] * (1 + 1e-12) and (
                    best_drop is None or entry["score"] > best_drop[1]["score"]
                ):
                    best_drop = (subset, entry)
            if best_drop is not None:
                current, best_entry = best_drop
                improved = True

    if not evaluated:
        raise TuningError("no candidates supplied")
    best_label = max(evaluated, key=lambda lbl: evaluated[lbl]["entry"]["score"])
    best = evaluated[best_label]
    rel = best["entry"]["relative_efficiency_estimate"]

    if rel <= 1.0:
        return TuningReport(
            chosen=best["chosen_info"],
            lambda_star=None,
            score=best["entry"]["score"],
            relative=rel,
            w2_hat=best["entry"]["w2_hat"],
            t_hat=best["entry"]["t_hat"],
            recommendation="standard-abc",
            table=table,
            policy=None,
            policy_spec=None,
            curves={},
            alpha_floor=alpha_floor,
            gamma_mode=gamma_mode,
            epsilon=epsilon,
        )

    # Rebuild a reusable policy for the winning candidate.
    info = best["chosen_info"]
    gamma_sm, t2_sm, lam = best["gamma_sm"], best["t2_sm"], best["lam"]
    if info["kind"] == "phi-key":
        at_k = record.checkpoint_of(info["key"])
    else:
        # Subset candidates replace the statistic at the final checkpoint.
        at_k = record.n_checkpoints - 1
    uses_cov = gamma_sm.meta.get("uses_covariate", False)

    def policy_fn(phi_vec, u, history):
        x = float(phi_vec[0])
        g = float(gamma_sm(x, extra=math.log(u)) if uses_cov else gamma_sm(x))
        t2v = float(t2_sm(x))
        if t2v <= 0:
            return 1.0
        return lam * u * math.sqrt(max(g, 0.0) / t2v)

    fns = [
        (policy_fn if j == at_k else (lambda phi_vec, u, history: 1.0))
        for j in range(record.n_checkpoints)
    ]
    policy = AlphaPolicy(
        tuple(fns),
        alpha_floor=alpha_floor,
        provenance=gamma_mode,
        lambdas=(lam,),
        phi_keys=tuple(f"cp{j}" for j in range(record.n_checkpoints)),
        meta={"chosen": info},
    )
    phi = best["phi"]
    grid = np.linspace(float(phi.min()), float(phi.max()), 201)
    curves = {
        "phi": grid.tolist(),
        "gamma": np.asarray(gamma_sm(grid), dtype=float).tolist(),
        "t2": np.asarray(t2_sm(grid), dtype=float).tolist(),
        "alpha": [policy.alpha(at_k, np.array([x]), 1.0, ()) for x in grid],
    }
    spec = policy_spec_from_policy_fns(policy, record, at_k, phi)
    return TuningReport(
        chosen=info,
        lambda_star=lam,
        score=best["entry"]["score"],
        relative=rel,
        w2_hat=best["entry"]["w2_hat"],
        t_hat=best["entry"]["t_hat"],
        recommendation="lazy",
        table=table,
        policy=policy,
        policy_spec=spec,
        curves=curves,
        alpha_floor=alpha_floor,
        gamma_mode=gamma_mode,
        epsilon=epsilon,
    )


def policy_spec_from_policy_fns(
    policy: AlphaPolicy, record: PilotRecord, active_checkpoint: int, phi: np.ndarray
) -> list:
    """Grid serialization of a single-active-checkpoint policy."""
    spec = []
    for k in range(len(policy.checkpoint_fns)):
        if k != active_checkpoint:
            spec.append({"kind": "constant", "value": 1.0})
            continue
        lo, hi = float(np.min(phi)), float(np.max(phi))
        grid = np.linspace(lo, hi, 257) if hi > lo else np.array([lo, lo + 1.0])
        base = np.array(
            [float(policy.checkpoint_fns[k](np.array([x]), 1.0, ())) for x in grid]
        )
        spec.append(
            {"kind": "grid", "phi": grid.tolist(), "base": base.tolist(), "use_u": True}
        )
    return spec


# ---------------------------------------------------------------------------
# multiple stopping decisions


def _level_index(values: np.ndarray, levels: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(values[:, None] - levels[None, :]), axis=1)


def _multistop_score(
    alphas: np.ndarray, u: np.ndarray, gamma: np.ndarray, stage_costs: np.ndarray
) -> float:
    w2, t = _efficiency_terms(u, gamma, alphas, stage_costs)
    return 1.0 / (w2 * t)


def tune_discrete_multistop(
    record: PilotRecord,
    discrete_phi_keys: Sequence[str],
    epsilon: float,
    *,
    alpha_floor: float = DEFAULT_ALPHA_FLOOR,
    max_levels: int = 16,
    u_of_phi=None,
    phi_includes_theta: bool = False,
) -> AlphaPolicy:
    """Jointly optimise per-level continuation probabilities for
    discrete decision statistics at every checkpoint.

    Coordinate ascent from several starts over ``[alpha_floor, 1]`` per
    (checkpoint, level) value, maximising the multi-stop efficiency
    estimate.
    """
    check_c3(record, u_of_phi, phi_includes_theta)
    keys = list(discrete_phi_keys)
    cps = [record.checkpoint_of(k) for k in keys]
    if sorted(cps) != list(range(record.n_checkpoints)):
        raise TuningError("discrete tuning needs one key per checkpoint")
    levels = {}
    level_idx = {}
    for key in keys:
        vals = np.asarray(record.phi[key], dtype=float)
        lv = np.unique(vals)
        if len(lv) > max_levels:
            raise TuningError(
                f"{key!r} takes {len(lv)} values (> {max_levels}); discretise the "
                "decision statistic before multi-stop tuning"
            )
        levels[key] = lv
        level_idx[key] = _level_index(vals, lv)

    # Empirical acceptance probability per joint level cell.
    cell_key = np.zeros(record.n, dtype=int)
    for key in keys:
        cell_key = cell_key * (len(levels[key]) + 1) + level_idx[key]
    accepted = record.acceptance(epsilon).astype(float)
    gamma = np.empty(record.n)
    for cell in np.unique(cell_key):
        sel = cell_key == cell
        gamma[sel] = accepted[sel].mean()

    var_slices = []
    offset = 0
    for key in keys:
        var_slices.append((key, offset, offset + len(levels[key])))
        offset += len(levels[key])
    n_vars = offset

    def alphas_from_vector(vec: np.ndarray) -> np.ndarray:
        a = np.ones((record.n, record.n_checkpoints))
        for (key, lo, hi), cp in zip(var_slices, cps):
            a[:, cp] = vec[lo:hi][level_idx[key]]
        return a

    def score(vec: np.ndarray) -> float:
        return _multistop_score(alphas_from_vector(vec), record.u, gamma, record.stage_costs)

    starts = [np.ones(n_vars), np.full(n_vars, 0.5), np.full(n_vars, 0.1)]
    best_vec, best_score = None, -math.inf
    for start in starts:
        vec = np.clip(start.copy(), alpha_floor, 1.0)
        current = score(vec)
        for _ in range(100):
            previous = current
            for v in range(n_vars):

                def fv(val):
                    trial = vec.copy()
                    trial[v] = val
                    return score(trial)

                vec[v] = _golden_max(fv, alpha_floor, 1.0, iters=60)
            current = score(vec)
            if current - previous <= 1e-12 * abs(previous):
                break
        if current > best_score:
            best_vec, best_score = vec.copy(), current

    fns = []
    for (key, lo, hi), cp in sorted(zip(var_slices, cps), key=lambda t: t[1]):
        lv, al = levels[key], best_vec[lo:hi]

        def level_fn(phi, u, hist, lv=lv, al=al):
            return float(al[int(np.argmin(np.abs(lv - float(phi[0]))))])

        fns.append(level_fn)
    return AlphaPolicy(
        tuple(fns),
        alpha_floor=alpha_floor,
        provenance="discrete-optimized",
        phi_keys=tuple(keys[cps.index(c)] for c in range(record.n_checkpoints)),
        meta={
            "score": best_score,
            "levels": {k: levels[k].tolist() for k in keys},
            "alphas": {
                k: best_vec[lo:hi].tolist() for (k, lo, hi) in var_slices
            },
        },
    )


def tune_one_continuous_multistop(
    record: PilotRecord,
    continuous_phi_key: str,
    discrete_phi_keys: Sequence[str],
    epsilon: float,
    *,
    alpha_floor: float = DEFAULT_ALPHA_FLOOR,
    max_rounds: int = 10,
    u_of_phi=None,
    phi_includes_theta: bool = False,
) -> AlphaPolicy:
    """Composite policy: discrete early checkpoints plus one continuous
    final checkpoint.

    Alternates between (a) the closed-form continuous policy with the
    acceptance estimate inversely weighted by the discrete continuation
    product and (b) re-optimising the discrete probabilities, keeping
    the best iterate.  Started both from all-continue discrete values
    and from the best discrete-only solution, so the result is never
    worse than either single-stop policy on the record.
    """
    check_c3(record, u_of_phi, phi_includes_theta)
    cont_cp = record.checkpoint_of(continuous_phi_key)
    disc_cps = [record.checkpoint_of(k) for k in discrete_phi_keys]
    if cont_cp != record.n_checkpoints - 1 or max(disc_cps, default=-1) >= cont_cp:
        raise TuningError(
            "the continuous decision must sit at the final checkpoint with all "
            "discrete decisions before it"
        )
    phi1 = np.asarray(record.phi[continuous_phi_key], dtype=float)
    accepted = record.acceptance(epsilon).astype(float)

    # Branch = joint discrete level combination.
    disc_levels = {}
    disc_level_idx = {}
    for key in discrete_phi_keys:
        vals = np.asarray(record.phi[key], dtype=float)
        lv = np.unique(vals)
        disc_levels[key] = lv
        disc_level_idx[key] = _level_index(vals, lv)
    branch = np.zeros(record.n, dtype=int)
    for key in discrete_phi_keys:
        branch = branch * (len(disc_levels[key]) + 1) + disc_level_idx[key]
    branch_ids = np.unique(branch)
    branch_pos = {b: i for i, b in enumerate(branch_ids)}
    branch = np.array([branch_pos[b] for b in branch])
    n_branches = len(branch_ids)

    # Per-branch acceptance-probability smoothers on the continuous
    # statistic (pooled fallback for thin branches).
    pooled = (
        fit_kernel_logistic(phi1, accepted)
        if 0 < accepted.sum() < record.n and len(phi1) >= 20
        else make_constant(
            min(max(accepted.mean(), 1e-6), 1 - 1e-6), "logistic",
            (float(phi1.min()), float(phi1.max())),
        )
    )
    branch_sm = []
    for b in range(n_branches):
        sel = branch == b
        zb = accepted[sel]
        if sel.sum() >= 20 and 0 < zb.sum() < sel.sum():
            branch_sm.append(fit_kernel_logistic(phi1[sel], zb))
        else:
            branch_sm.append(pooled)
    gamma_rows = np.array(
        [float(branch_sm[branch[i]](phi1[i])) for i in range(record.n)]
    )

    t21 = record.cost_after(cont_cp)
    t21_branch = np.array(
        [
            t21[branch == b].mean() if (branch == b).any() else t21.mean()
            for b in range(n_branches)
        ]
    )
    t21_rows = t21_branch[branch]

    def disc_alpha_matrix(disc_vec: np.ndarray) -> np.ndarray:
        a = np.ones((record.n, record.n_checkpoints))
        for j, key in enumerate(discrete_phi_keys):
            lv = disc_levels[key]
            lo = sum(len(disc_levels[kk]) for kk in discrete_phi_keys[:j])
            a[:, disc_cps[j]] = disc_vec[lo : lo + len(lv)][disc_level_idx[key]]
        return a

    n_disc_vars = sum(len(disc_levels[k]) for k in discrete_phi_keys)

    def full_score(disc_vec: np.ndarray, lam: float) -> float:
        a = disc_alpha_matrix(disc_vec)
        beta = np.prod(a[:, :cont_cp], axis=1) if cont_cp > 0 else np.ones(record.n)
        base = _alpha_base(record.u, gamma_rows / beta, t21_rows)
        a[:, cont_cp] = np.clip(lam * base, alpha_floor, 1.0)
        return _multistop_score(a, record.u, gamma_rows, record.stage_costs)

    def optimize_lam(disc_vec: np.ndarray) -> tuple[float, float]:
        a = disc_alpha_matrix(disc_vec)
        beta = np.prod(a[:, :cont_cp], axis=1) if cont_cp > 0 else np.ones(record.n)
        base = _alpha_base(record.u, gamma_rows / beta, t21_rows)

        def sc(lam):
            trial = a.copy()
            trial[:, cont_cp] = np.clip(lam * base, alpha_floor, 1.0)
            return _multistop_score(trial, record.u, gamma_rows, record.stage_costs)

        grid = np.geomspace(1e-4, 1e4, 41)
        scores = [sc(l) for l in grid]
        j = int(np.argmax(scores))
        log_star = _golden_max(
            lambda ll: sc(math.exp(ll)),
            math.log(grid[max(j - 1, 0)]),
            math.log(grid[min(j + 1, len(grid) - 1)]),
        )
        lam = math.exp(log_star)
        if sc(lam) < scores[j]:
            lam = float(grid[j])
        return lam, sc(lam)

    def optimize_disc(disc_vec: np.ndarray, lam: float) -> np.ndarray:
        vec = disc_vec.copy()
        for v in range(n_disc_vars):

            def fv(val):
                trial = vec.copy()
                trial[v] = val
                return full_score(trial, lam)

            vec[v] = _golden_max(fv, alpha_floor, 1.0, iters=60)
        return vec

    def run_from(disc_start: np.ndarray):
        disc = disc_start.copy()
        lam, sc = optimize_lam(disc)
        best = (disc.copy(), lam, sc)
        converged = False
        for _ in range(max_rounds):
            disc = optimize_disc(disc, lam)
            lam, sc = optimize_lam(disc)
            if sc > best[2]:
                if sc - best[2] <= 1e-10 * abs(best[2]):
                    best = (disc.copy(), lam, sc)
                    converged = True
                    break
                best = (disc.copy(), lam, sc)
            else:
                converged = True
                break
        return best, converged

    # Start A: all-continue discrete values (round one reproduces the
    # single-stop continuous solution).  Start B: best discrete-only.
    start_a = np.ones(n_disc_vars)
    (best_a, conv_a) = run_from(start_a)
    start_b = np.ones(n_disc_vars)
    for _ in range(50):
        prev = start_b.copy()
        for v in range(n_disc_vars):

            def fv(val):
                trial = start_b.copy()
                trial[v] = val
                a = disc_alpha_matrix(trial)
                return _multistop_score(a, record.u, gamma_rows, record.stage_costs)

            start_b[v] = _golden_max(fv, alpha_floor, 1.0, iters=60)
        if np.max(np.abs(start_b - prev)) < 1e-10:
            break
    (best_b, conv_b) = run_from(start_b)
    (disc_vec, lam, sc), converged = (
        (best_a, conv_a) if best_a[2] >= best_b[2] else (best_b, conv_b)
    )
    if not converged:
        logger.warning("multi-stop tuning did not converge; returning best iterate")

    beta_branch = np.ones(n_branches)
    a_mat = disc_alpha_matrix(disc_vec)
    for b in range(n_branches):
        rows = np.flatnonzero(branch == b)
        if len(rows):
            beta_branch[b] = np.prod(a_mat[rows[0], :cont_cp]) if cont_cp > 0 else 1.0

    fns = []
    offset = 0
    for j, key in enumerate(discrete_phi_keys):
        lv = disc_levels[key]
        al = disc_vec[offset : offset + len(lv)]
        offset += len(lv)

        def level_fn(phi, u, hist, lv=lv, al=al):
            return float(al[int(np.argmin(np.abs(lv - float(phi[0]))))])

        fns.append(level_fn)

    def branch_of_history(history) -> int:
        code = 0
        for j, key in enumerate(discrete_phi_keys):
            lv = disc_levels[key]
            val = float(np.atleast_1d(history[disc_cps[j]])[0])
            code = code * (len(lv) + 1) + int(np.argmin(np.abs(lv - val)))
        return branch_pos.get(code, 0)

    def cont_fn(phi, u, history):
        b = branch_of_history(history)
        g = float(branch_sm[b](float(phi[0]))) / beta_branch[b]
        t2v = float(t21_branch[b])
        if t2v <= 0:
            return 1.0
        return lam * u * math.sqrt(max(g, 0.0) / t2v)

    fns.append(cont_fn)
    keys_out = list(discrete_phi_keys) + [continuous_phi_key]
    return AlphaPolicy(
        tuple(fns),
        alpha_floor=alpha_floor,
        provenance="one-continuous-multistop",
        lambdas=(lam,),
        phi_keys=tuple(keys_out),
        meta={
            "score": sc,
            "converged": converged,
            "discrete_alphas": disc_vec.tolist(),
            "branch_t2": t21_branch.tolist(),
        },
    )


# ---------------------------------------------------------------------------
# optimal proposal on a grid


def optimal_g(prior_grid, gamma_of_theta, tbar_of_theta) -> np.ndarray:
    """Proposal weights proportional to prior * sqrt(gamma / tbar),
    normalised over the grid."""
    thetas, pis = prior_grid
    pis = np.asarray(pis, dtype=float)
    gamma = (
        np.asarray([gamma_of_theta(t) for t in thetas], dtype=float)
        if callable(gamma_of_theta)
        else np.asarray(gamma_of_theta, dtype=float)
    )
    tbar = (
        np.asarray([tbar_of_theta(t) for t in thetas], dtype=float)
        if callable(tbar_of_theta)
        else np.asarray(tbar_of_theta, dtype=float)
    )
    if np.any(gamma < 0):
        raise ValueError("acceptance probabilities must be non-negative")
    if np.any(tbar <= 0):
        raise ValueError("expected costs must be positive")
    if not np.any(gamma > 0):
        raise ValueError("acceptance probability is zero everywhere on the grid")
    g = pis * np.sqrt(gamma / tbar)
    return g / g.sum()


def grid_efficiency(pis, gs, gamma, tbar) -> float:
    """Asymptotic efficiency (up to a constant) of a grid proposal:
    1 / (E[W^2] * E[T]) with exact grid expectations."""
    pis = np.asarray(pis, dtype=float)
    gs = np.asarray(gs, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    tbar = np.asarray(tbar, dtype=float)
    support = gs > 0
    if np.any((pis > 0) & (gamma > 0) & ~support):
        return 0.0
    w2 = float((pis[support] ** 2 * gamma[support] / gs[support]).sum())
    et = float((gs * tbar).sum())
    return 1.0 / (w2 * et)


# ---------------------------------------------------------------------------
# pilot record persistence

_RECORD_FILE = "pilot_record.csv"
_RECORD_META = "pilot_meta.json"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_pilot_record(record: PilotRecord, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    n = record.n
    header = [f"theta_{j}" for j in range(record.theta.shape[1])]
    header += ["u"]
    phi_cols = []
    for key in sorted(record.phi):
        col = record.phi[key]
        if col.ndim == 1:
            phi_cols.append((f"phi_{key}", col))
        else:
            for j in range(col.shape[1]):
                phi_cols.append((f"phi_{key}_{j}", col[:, j]))
    header += [name for name, _ in phi_cols]
    header += [f"stage_cost_{j}" for j in range(record.stage_costs.shape[1])]
    header += ["distance"]
    header += [f"summary_{j}" for j in range(record.summary.shape[1])]
    aux_cols = []
    for key in sorted(record.aux):
        arr = record.aux[key]
        for j in range(arr.shape[1]):
            aux_cols.append((f"aux_{key}_{j}", arr[:, j]))
    header += [name for name, _ in aux_cols]
    with open(os.path.join(directory, _RECORD_FILE), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            row = [_fmt(v) for v in record.theta[i]]
            row.append(_fmt(record.u[i]))
            row += [_fmt(col[i]) for _, col in phi_cols]
            row += [_fmt(v) for v in record.stage_costs[i]]
            row.append(_fmt(record.distance[i]))
            row += [_fmt(v) for v in record.summary[i]]
            row += [_fmt(col[i]) for _, col in aux_cols]
            writer.writerow(row)
    meta = {
        "n": n,
        "theta_dim": record.theta.shape[1],
        "phi_keys": {k: (1 if record.phi[k].ndim == 1 else record.phi[k].shape[1])
                     for k in sorted(record.phi)},
        "n_stages": record.stage_costs.shape[1],
        "summary_dim": record.summary.shape[1],
        "aux_keys": {k: record.aux[k].shape[1] for k in sorted(record.aux)},
        "epsilon": record.epsilon,
        "base_seed": record.base_seed,
        "model_id": record.model_id,
        "data_id": record.data_id,
        "cost_mode": record.cost_mode,
    }
    with open(os.path.join(directory, _RECORD_META), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_pilot_record(directory: str) -> PilotRecord:
    with open(os.path.join(directory, _RECORD_META)) as fh:
        meta = json.load(fh)
    data = np.genfromtxt(
        os.path.join(directory, _RECORD_FILE), delimiter=",", names=True
    )
    n = int(meta["n"])

    def col(name):
        values = np.atleast_1d(np.asarray(data[name], dtype=float))
        return values

    p = int(meta["theta_dim"])
    theta = np.column_stack([col(f"theta_{j}") for j in range(p)])
    u = col("u")
    phi = {}
    for key, width in meta["phi_keys"].items():
        if width == 1:
            phi[key] = col(f"phi_{key}")
        else:
            phi[key] = np.column_stack([col(f"phi_{key}_{j}") for j in range(width)])
    costs = np.column_stack(
        [col(f"stage_cost_{j}") for j in range(int(meta["n_stages"]))]
    )
    distance = col("distance")
    summary = np.column_stack(
        [col(f"summary_{j}") for j in range(int(meta["summary_dim"]))]
    )
    aux = {}
    for key, width in meta.get("aux_keys", {}).items():
        aux[key] = np.column_stack([col(f"aux_{key}_{j}") for j in range(width)])
    return PilotRecord(
        theta=theta,
        u=u,
        phi=phi,
        stage_costs=costs,
        distance=distance,
        summary=summary,
        aux=aux,
        epsilon=float(meta["epsilon"]),
        base_seed=int(meta["base_seed"]),
        model_id=meta["model_id"],
        data_id=meta["data_id"],
        cost_mode=meta["cost_mode"],
    )
