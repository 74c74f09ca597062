"""One-dimensional conditional estimators used by the tuning pipeline.

All fits use a Gaussian kernel with degree-one local likelihood (or
local least squares on the log scale for positive responses).  Fitted
smoothers are immutable: they evaluate via a dense grid computed at
fit time, clamp queries to the training range and flag extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import expit, ndtr

_GRID_SIZE = 129
_MAX_NEWTON = 40
_LOO_EVAL_CAP = 300

BOXCOX_LAMBDA_GRID = (-1.0, -0.5, 0.0, 0.25, 0.5, 1.0)


@dataclass(frozen=True, eq=False)
class Smoother:
    """A fitted conditional-mean or probability curve.

    Calling evaluates at new points; queries outside the training
    range use the boundary value and are reported by
    :meth:`is_extrapolation`.
    """

    kind: str  # logistic | log-link mean | boxcox-window | interpolant
    x_min: float
    x_max: float
    evaluate: Callable[[np.ndarray, Optional[object]], np.ndarray]
    bandwidth: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __call__(self, x, extra=None):
        arr = np.asarray(x, dtype=float)
        scalar = arr.ndim == 0
        xs = np.clip(np.atleast_1d(arr), self.x_min, self.x_max)
        vals = np.asarray(self.evaluate(xs, extra), dtype=float)
        return float(vals[0]) if scalar else vals

    def is_extrapolation(self, x):
        arr = np.asarray(x, dtype=float)
        flags = (arr < self.x_min) | (arr > self.x_max)
        return bool(flags) if arr.ndim == 0 else flags


def make_constant(value: float, kind: str, x_range=(0.0, 0.0)) -> Smoother:
    lo, hi = float(x_range[0]), float(x_range[1])
    val = float(value)
    return Smoother(
        kind=kind,
        x_min=lo,
        x_max=hi,
        evaluate=lambda xs, extra=None: np.full(len(xs), val),
        meta={"constant": True},
    )


def _grid_smoother(kind, grid_x, grid_y, bandwidth, log_scale=False, meta=None):
    gx = np.asarray(grid_x, dtype=float)
    gy = np.asarray(grid_y, dtype=float)
    stored = np.log(gy) if log_scale else gy

    def evaluate(xs, extra=None):
        vals = np.interp(xs, gx, stored)
        return np.exp(vals) if log_scale else vals

    return Smoother(
        kind=kind,
        x_min=float(gx[0]),
        x_max=float(gx[-1]),
        evaluate=evaluate,
        bandwidth=bandwidth,
        meta=meta or {},
    )


# ---------------------------------------------------------------------------
# local-likelihood cores


def _kernel_weights(x_eval, x, h):
    z = (x_eval[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z)


def _local_logistic(x, successes, trials, x_eval, h, loo=False):
    """Degree-one local-likelihood logistic fit at each eval point.

    Returns fitted probabilities and the standard error of the local
    intercept on the log-odds scale.
    """
    w = _kernel_weights(x_eval, x, h)
    if loo:
        np.fill_diagonal(w, 0.0)
    dx = x[None, :] - x_eval[:, None]
    total = successes.sum()
    denom = trials.sum()
    p0 = min(max(total / denom, 1e-3), 1.0 - 1e-3)
    b0 = np.full(len(x_eval), math.log(p0 / (1.0 - p0)))
    b1 = np.zeros(len(x_eval))
    scale = max(float(np.std(x)), 1e-12)
    ridge = 1e-8
    for _ in range(_MAX_NEWTON):
        eta = np.clip(b0[:, None] + b1[:, None] * dx, -30.0, 30.0)
        mu = expit(eta)
        v = trials[None, :] * mu * (1.0 - mu)
        resid = successes[None, :] - trials[None, :] * mu
        g0 = (w * resid).sum(axis=1)
        g1 = (w * resid * dx).sum(axis=1)
        h00 = (w * v).sum(axis=1) + ridge
        h01 = (w * v * dx).sum(axis=1)
        h11 = (w * v * dx * dx).sum(axis=1) + ridge * scale * scale
        det = h00 * h11 - h01 * h01
        db0 = (h11 * g0 - h01 * g1) / det
        db1 = (h00 * g1 - h01 * g0) / det
        b0 += np.clip(db0, -4.0, 4.0)
        b1 += np.clip(db1, -4.0 / scale, 4.0 / scale)
        if np.max(np.abs(db0)) < 1e-10:
            break
    eta = np.clip(b0[:, None] + b1[:, None] * dx, -30.0, 30.0)
    mu = expit(eta)
    v = trials[None, :] * mu * (1.0 - mu)
    h00 = (w * v).sum(axis=1) + ridge
    h01 = (w * v * dx).sum(axis=1)
    h11 = (w * v * dx * dx).sum(axis=1) + ridge * scale * scale
    det = h00 * h11 - h01 * h01
    se = np.sqrt(np.maximum(h11 / det, 0.0))
    return expit(b0), se


def _local_log_mean(x, log_y, x_eval, h, loo=False):
    """Degree-one weighted least squares of log-response."""
    w = _kernel_weights(x_eval, x, h)
    if loo:
        np.fill_diagonal(w, 0.0)
    dx = x[None, :] - x_eval[:, None]
    sw = w.sum(axis=1) + 1e-300
    swx = (w * dx).sum(axis=1)
    swxx = (w * dx * dx).sum(axis=1) + 1e-12
    swy = (w * log_y[None, :]).sum(axis=1)
    swxy = (w * dx * log_y[None, :]).sum(axis=1)
    det = sw * swxx - swx * swx
    small = det <= 1e-12 * swxx
    b0 = np.where(small, swy / sw, (swxx * swy - swx * swxy) / np.where(det == 0, 1, det))
    return b0


def _bandwidth_grid(x):
    span = float(np.ptp(x))
    if span <= 0:
        return np.array([1.0])
    return span * np.geomspace(0.01, 0.5, 10)


def _loo_eval_points(x):
    n = len(x)
    if n <= _LOO_EVAL_CAP:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, _LOO_EVAL_CAP).astype(int))


def _select_bandwidth(x, score_fn, bandwidths=None):
    hs = _bandwidth_grid(x) if bandwidths is None else np.asarray(bandwidths)
    scores = [score_fn(h) for h in hs]
    return float(hs[int(np.argmax(scores))])


# ---------------------------------------------------------------------------
# public fitting operations


def fit_kernel_logistic(x, z, bandwidth: Optional[float] = None) -> Smoother:
    """Kernel-smoothed estimate of ``P(z = 1 | x)`` for binary ``z``.

    Bandwidth is chosen by leave-one-out likelihood over a log-spaced
    grid when not supplied.  A one-class sample yields a constant fit
    at the empirical rate, clamped away from 0 and 1.
    """
    x = np.asarray(x, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if len(x) != len(z):
        raise ValueError("x and z must have equal length")
    if len(x) < 20:
        raise ValueError("need at least 20 observations")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("z must be binary")
    n = len(x)
    lo_clamp = 1.0 / (n + 2)
    hi_clamp = (n + 1.0) / (n + 2)
    rate = float(z.mean())
    if rate in (0.0, 1.0) or np.ptp(x) == 0:
        return make_constant(
            min(max(rate, lo_clamp), hi_clamp), "logistic", (x.min(), x.max())
        )
    trials = np.ones(n)
    if bandwidth is None:
        order = np.argsort(x, kind="stable")
        xs_sorted, zs_sorted = x[order], z[order]
        idx = _loo_eval_points(xs_sorted)

        def loo_score(h):
            mu, _ = _local_logistic(
                xs_sorted[idx], zs_sorted[idx], np.ones(len(idx)), xs_sorted[idx], h, loo=True
            )
            mu = np.clip(mu, 1e-10, 1 - 1e-10)
            return float(
                (zs_sorted[idx] * np.log(mu) + (1 - zs_sorted[idx]) * np.log(1 - mu)).sum()
            )

        bandwidth = _select_bandwidth(x, loo_score)
    grid = np.linspace(x.min(), x.max(), _GRID_SIZE)
    mu, _ = _local_logistic(x, z, trials, grid, bandwidth)
    mu = np.clip(mu, lo_clamp, hi_clamp)
    return _grid_smoother("logistic", grid, mu, bandwidth)


def fit_binomial_mean(x, successes, trials: int, bandwidth: Optional[float] = None) -> Smoother:
    """Kernel-smoothed per-trial success probability with a pointwise
    95% interval (normal approximation on the log-odds scale)."""
    x = np.asarray(x, dtype=float).ravel()
    successes = np.asarray(successes, dtype=float).ravel()
    if trials <= 0:
        raise ValueError("trials must be positive")
    if np.any(successes < 0) or np.any(successes > trials):
        raise ValueError("successes must lie in [0, trials]")
    if len(x) < 20:
        raise ValueError("need at least 20 observations")
    n = len(x)
    trials_arr = np.full(n, float(trials))
    if np.ptp(x) == 0:
        rate = successes.sum() / trials_arr.sum()
        rate = min(max(rate, 1.0 / (n * trials + 2)), 1.0 - 1.0 / (n * trials + 2))
        return make_constant(rate, "logistic", (x.min(), x.max()))
    if bandwidth is None:
        order = np.argsort(x, kind="stable")
        xs_sorted, ss_sorted = x[order], successes[order]
        idx = _loo_eval_points(xs_sorted)
        t_idx = np.full(len(idx), float(trials))

        def loo_score(h):
            mu, _ = _local_logistic(
                xs_sorted[idx], ss_sorted[idx], t_idx, xs_sorted[idx], h, loo=True
            )
            mu = np.clip(mu, 1e-10, 1 - 1e-10)
            return float(
                (ss_sorted[idx] * np.log(mu) + (t_idx - ss_sorted[idx]) * np.log(1 - mu)).sum()
            )

        bandwidth = _select_bandwidth(x, loo_score)
    grid = np.linspace(x.min(), x.max(), _GRID_SIZE)
    mu, se = _local_logistic(x, successes, trials_arr, grid, bandwidth)
    eps = 1e-9
    mu = np.clip(mu, eps, 1 - eps)
    eta = np.log(mu / (1 - mu))
    lo = expit(eta - 1.96 * se)
    hi = expit(eta + 1.96 * se)

    smoother = _grid_smoother("logistic", grid, mu, bandwidth)

    def interval(xq):
        arr = np.atleast_1d(np.asarray(xq, dtype=float))
        arr = np.clip(arr, grid[0], grid[-1])
        return np.interp(arr, grid, lo), np.interp(arr, grid, hi)

    smoother.meta["interval"] = interval
    return smoother


def fit_positive_mean(x, y, bandwidth: Optional[float] = None) -> Smoother:
    """Kernel regression of a positive response through a log link."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("responses must be positive and finite")
    if len(x) < 20:
        raise ValueError("need at least 20 observations")
    log_y = np.log(y)
    if np.ptp(x) == 0:
        return make_constant(
            math.exp(float(log_y.mean())), "log-link mean", (x.min(), x.max())
        )
    if bandwidth is None:
        order = np.argsort(x, kind="stable")
        xs_sorted, ly_sorted = x[order], log_y[order]
        idx = _loo_eval_points(xs_sorted)

        def loo_score(h):
            pred = _local_log_mean(xs_sorted[idx], ly_sorted[idx], xs_sorted[idx], h, loo=True)
            return -float(((pred - ly_sorted[idx]) ** 2).sum())

        bandwidth = _select_bandwidth(x, loo_score)
    grid = np.linspace(x.min(), x.max(), _GRID_SIZE)
    b0 = _local_log_mean(x, log_y, grid, bandwidth)
    return _grid_smoother("log-link mean", grid, np.exp(b0), bandwidth, log_scale=True)


# ---------------------------------------------------------------------------
# windowed Box-Cox tail probabilities


def _boxcox(v: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0.0:
        return np.log(v)
    return (np.power(v, lam) - 1.0) / lam


def _ols(design: np.ndarray, response: np.ndarray):
    coef, _, _, _ = np.linalg.lstsq(design, response, rcond=None)
    resid = response - design @ coef
    sigma2 = float((resid * resid).mean())
    return coef, math.sqrt(sigma2)


def fit_tail_prob_boxcox(
    dhat,
    d,
    epsilon: float,
    window_centers=None,
    window_width: Optional[float] = None,
    extra_covariate=None,
    *,
    lambda_grid=BOXCOX_LAMBDA_GRID,
    min_points: int = 30,
) -> Smoother:
    """Estimate ``P(d <= epsilon | dhat)`` by windowed transformed
    regression.

    Within each window of nearby ``dhat`` values, a Box-Cox exponent is
    chosen by profile likelihood, ``d`` is regressed linearly on
    ``dhat`` (plus the optional covariate) on the transformed scale and
    the Gaussian tail probability below ``epsilon`` is evaluated at the
    window centre.  The per-centre estimates are joined by
    shape-preserving interpolation.  With a covariate, evaluation takes
    its value through the ``extra`` argument (training mean when
    omitted).
    """
    dhat = np.asarray(dhat, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    if len(dhat) != len(d):
        raise ValueError("dhat and d must have equal length")
    if np.any(d <= 0):
        raise ValueError("distances must be positive for the transformed fit")
    if len(d) < min_points:
        raise ValueError(
            f"only {len(d)} points available; enlarge the pilot run "
            f"(need at least {min_points} per window)"
        )
    cov = None
    if extra_covariate is not None:
        cov = np.asarray(extra_covariate, dtype=float).ravel()
        if len(cov) != len(d):
            raise ValueError("covariate length mismatch")
    if window_centers is None:
        qs = np.quantile(dhat, np.linspace(0.1, 0.9, 9))
        window_centers = np.unique(qs)
    centers = np.sort(np.asarray(window_centers, dtype=float))
    if window_width is None:
        gaps = np.diff(centers)
        window_width = 2.0 * float(np.median(gaps)) if len(gaps) else float(
            np.ptp(dhat) or 1.0
        )

    log_d = np.log(d)
    bc_cache = {lam: _boxcox(d, lam) for lam in lambda_grid}
    fits = []
    widened_any = False
    for center in centers:
        width = window_width
        sel = np.abs(dhat - center) <= width / 2.0
        while sel.sum() < min_points and not sel.all():
            width *= 1.5
            sel = np.abs(dhat - center) <= width / 2.0
            widened_any = True
        cols = [np.ones(sel.sum()), dhat[sel]]
        cov_ref = None
        if cov is not None:
            cols.append(cov[sel])
            cov_ref = float(cov[sel].mean())
        design = np.column_stack(cols)
        best = None
        for lam in lambda_grid:
            coef, sigma = _ols(design, bc_cache[lam][sel])
            n_w = sel.sum()
            loglik = -0.5 * n_w * math.log(max(sigma * sigma, 1e-300)) + (
                lam - 1.0
            ) * float(log_d[sel].sum())
            if best is None or loglik > best[0]:
                best = (loglik, lam, coef, sigma)
        _, lam, coef, sigma = best
        fits.append(
            {"center": float(center), "lambda": lam, "coef": coef, "sigma": sigma,
             "cov_ref": cov_ref}
        )

    def tail_prob(fit, x, extra_val):
        pred = fit["coef"][0] + fit["coef"][1] * x
        if cov is not None:
            v = fit["cov_ref"] if extra_val is None else float(extra_val)
            pred = pred + fit["coef"][2] * v
        bc_eps = _boxcox(np.asarray(epsilon, dtype=float), fit["lambda"])
        if fit["sigma"] <= 0:
            return np.where(bc_eps >= pred, 1.0, 0.0)
        return ndtr((bc_eps - pred) / fit["sigma"])

    def gamma_at_centers(extra_val):
        return np.array([float(tail_prob(f, f["center"], extra_val)) for f in fits])

    xs_knots = np.array([f["center"] for f in fits])
    keep = np.concatenate([[True], np.diff(xs_knots) > 0])
    xs_knots = xs_knots[keep]
    cache: dict = {}

    def _interp_for(extra_val):
        key = None if extra_val is None else float(extra_val)
        if key not in cache:
            vals = gamma_at_centers(extra_val)[keep]
            if len(xs_knots) == 1:
                cache[key] = ("const", float(vals[0]))
            else:
                cache[key] = ("pchip", PchipInterpolator(xs_knots, vals, extrapolate=False))
        return cache[key]

    def evaluate(xq, extra=None):
        kind_tag, obj = _interp_for(None if cov is None else extra)
        if kind_tag == "const":
            return np.full(len(xq), obj)
        out = obj(np.clip(xq, xs_knots[0], xs_knots[-1]))
        return np.clip(out, 0.0, 1.0)

    return Smoother(
        kind="boxcox-window",
        x_min=float(xs_knots[0]),
        x_max=float(xs_knots[-1]),
        evaluate=evaluate,
        bandwidth=float(window_width),
        meta={
            "centers": [f["center"] for f in fits],
            "lambdas": [f["lambda"] for f in fits],
            "widened": widened_any,
            "uses_covariate": cov is not None,
            "degenerate": bool(np.ptp(d) == 0),
        },
    )


def monotone_interpolate(xs, ys) -> Smoother:
    """Shape-preserving piecewise-cubic interpolant with constant,
    flagged extrapolation beyond the knots."""
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need at least two knots")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("knots must be strictly increasing")
    interp = PchipInterpolator(xs, ys, extrapolate=False)

    def evaluate(xq, extra=None):
        return np.asarray(interp(np.clip(xq, xs[0], xs[-1])), dtype=float)

    return Smoother(
        kind="interpolant",
        x_min=float(xs[0]),
        x_max=float(xs[-1]),
        evaluate=evaluate,
    )
