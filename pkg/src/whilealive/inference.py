"""Confidence intervals, predicted rates, window-averaged effects and Wald tests."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .basis import evaluate_basis
from .estimator import FitResult


class InferenceError(RuntimeError):
    pass


def _vcov(fit: FitResult) -> np.ndarray:
    if fit.vcov is None:
        raise InferenceError("fit has no covariance matrix")
    return fit.vcov


def _z(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + level / 2))


@dataclass(frozen=True)
class EffectCurve:
    """Estimated ``beta_j(t)`` on a time grid with pointwise standard errors."""

    j: int
    times: np.ndarray
    estimate: np.ndarray
    se: np.ndarray

    def interval(self, level: float = 0.95):
        z = _z(level)
        return self.estimate - z * self.se, self.estimate + z * self.se


def effect_curve(fit: FitResult, j: int, times) -> EffectCurve:
    """``beta_j(t)`` and its standard error at each time."""
    V = _vcov(fit)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    J = evaluate_basis(fit.spec.basis, times)
    blk = fit.block(j)
    est = J @ fit.gamma[blk]
    var = np.einsum("tr,rs,ts->t", J, V[blk, blk], J)
    return EffectCurve(j, times, est, np.sqrt(np.maximum(var, 0.0)))


def pointwise_ci(fit: FitResult, j: int, t: float, level: float = 0.95) -> tuple[float, float, float]:
    """Estimate and normal-theory interval for ``beta_j(t)``."""
    c = effect_curve(fit, j, [t])
    lo, hi = c.interval(level)
    return float(c.estimate[0]), float(lo[0]), float(hi[0])


def predict_rate(fit: FitResult, Z, t, level: float = 0.95):
    """Predicted while-alive loss rate with a delta-method interval.

    The interval is symmetric on the rate scale:
    ``m +/- z * |d eta^{-1}| * SE(beta(t)'Z)``.

    Parameters
    ----------
    Z : array_like, shape (p,) or (k, p)
    t : float or array_like aligned with the rows of ``Z``

    Returns
    -------
    rate, lower, upper : float or ndarray
    """
    V = _vcov(fit)
    Z = np.asarray(Z, dtype=float)
    scalar = Z.ndim == 1 and np.ndim(t) == 0
    Z2 = np.atleast_2d(Z)
    t = np.broadcast_to(np.asarray(t, dtype=float), (Z2.shape[0],))
    J = evaluate_basis(fit.spec.basis, t)
    X = (Z2[:, :, None] * J[:, None, :]).reshape(Z2.shape[0], -1)
    lp = X @ fit.gamma
    se_lp = np.sqrt(np.maximum(np.einsum("ka,ab,kb->k", X, V, X), 0.0))
    link = fit.spec.link
    rate = link.inverse(lp)
    half = _z(level) * np.abs(link.inverse_deriv(lp)) * se_lp
    out = rate, rate - half, rate + half
    return tuple(float(x[0]) for x in out) if scalar else out


def averaged_effect(
    fit: FitResult,
    j: int,
    t_a: float,
    t_b: float,
    weight_fn: Callable | str | None = None,
    n_grid: int = 200,
) -> tuple[float, float]:
    """Weighted time-average of ``beta_j`` over ``[t_a, t_b]`` and its SE.

    Both integrals use the trapezoid rule on ``n_grid`` points.  The
    estimate is a linear functional ``g'gamma_j`` so its variance is
    ``g' V_jj g``.

    Parameters
    ----------
    weight_fn : callable, "at-risk" or None
        ``None`` means a constant weight.  ``"at-risk"`` uses the proportion of
        subjects still under observation, ``#{U_i >= u} / n``, which estimates
        the probability of being alive and uncensored at ``u``.
    """
    if not t_b > t_a:
        raise ValueError("averaging window is empty (need t_a < t_b)")
    if t_a < 0:
        raise ValueError("t_a must be nonnegative")
    u = np.linspace(t_a, t_b, n_grid)
    if weight_fn is None:
        omega = np.ones_like(u)
    elif isinstance(weight_fn, str):
        if weight_fn != "at-risk":
            raise ValueError(f"unknown weight {weight_fn!r}")
        if fit.followup is None:
            raise InferenceError("fit does not carry follow-up times for at-risk weights")
        U = fit.followup
        omega = (U.size - np.searchsorted(U, u, side="left")) / U.size
    else:
        omega = np.asarray([weight_fn(x) for x in u], dtype=float)
    trap = np.full(n_grid, (t_b - t_a) / (n_grid - 1))
    trap[[0, -1]] /= 2
    c = trap * omega
    if c.sum() <= 0:
        raise ValueError("weight function integrates to zero over the window")
    g = c @ evaluate_basis(fit.spec.basis, u) / c.sum()
    blk = fit.block(j)
    est = float(g @ fit.gamma[blk])
    se = math.nan if fit.vcov is None else float(math.sqrt(max(g @ fit.vcov[blk, blk] @ g, 0.0)))
    return est, se


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float
    j: int


def wald_test(estimate, cov, j: int = 0) -> WaldResult:
    """``chi2 = b' C^{-1} b`` with ``len(b)`` degrees of freedom."""
    b = np.atleast_1d(np.asarray(estimate, dtype=float))
    C = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        stat = float(b @ np.linalg.solve(C, b))
    except np.linalg.LinAlgError:
        raise InferenceError(f"covariance block {j} is singular") from None
    stat = max(stat, 0.0)
    return WaldResult(stat, b.size, float(stats.chi2.sf(stat, b.size)), j)


def global_wald(fit: FitResult, j: int) -> WaldResult:
    """Test that every coefficient of covariate ``j`` is zero (``beta_j == 0``)."""
    V = _vcov(fit)
    blk = fit.block(j)
    return wald_test(fit.gamma[blk], V[blk, blk], j)


def rate_reduction(log_ratio: float) -> float:
    """Relative reduction ``1 - exp(b)`` implied by a log rate ratio ``b``."""
    return 1.0 - math.exp(log_ratio)


def knot_table(fit: FitResult, level: float = 0.95) -> list[dict]:
    """Per-knot estimates and intervals for every covariate."""
    rows = []
    for j, name in enumerate(fit.covariate_names):
        curve = effect_curve(fit, j, fit.spec.tau_grid)
        lo, hi = curve.interval(level)
        for k, t in enumerate(curve.times):
            rows.append(
                {
                    "covariate": name,
                    "t": float(t),
                    "estimate": float(curve.estimate[k]),
                    "se": float(curve.se[k]),
                    "lower": float(lo[k]),
                    "upper": float(hi[k]),
                }
            )
    return rows
