"""Censoring survival ``G(t | Z) = P(C >= t | Z)`` and inverse-probability weights.

Two estimators are provided: a product-limit (Kaplan-Meier) estimator,
optionally stratified on covariate values, and a proportional-hazards model
fitted by the Breslow partial likelihood.  Both are left-continuous: the
product or cumulative hazard runs over jump times strictly before ``t``, so a
subject is evaluable at its own follow-up time.

Risk sets are ``{j : U_j >= u}``.  When a death and a censoring share a time
the subject with the death is not a censoring event but stays in the risk set
at that time.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .data import EventDataset, SubjectData


class CensoringError(RuntimeError):
    """Base class for censoring-model failures."""


class NoCensoringEventsError(CensoringError):
    pass


class SingularInformationError(CensoringError):
    pass


class CoxConvergenceError(CensoringError):
    pass


class PositivityError(CensoringError):
    pass


@dataclass(frozen=True)
class Stratum:
    """Jump-time summaries of one stratum of the censoring model.

    ``s0`` and ``s1`` are raw (unnormalised) risk-set sums
    ``sum_j I(U_j >= u) exp(theta'Z_j) Z_j^d``; ``dlam`` holds the hazard
    increments (baseline increments for the Cox model).
    """

    times: np.ndarray
    dlam: np.ndarray
    counts: np.ndarray
    s0: np.ndarray
    zbar: np.ndarray  # (m, q); empty columns for product-limit

    @property
    def cumhaz(self) -> np.ndarray:
        return np.cumsum(self.dlam)

    def cumhaz_before(self, t) -> np.ndarray:
        """Cumulative hazard summed over jumps strictly before ``t``."""
        idx = np.searchsorted(self.times, t, side="left")
        ch = np.concatenate([[0.0], self.cumhaz])
        return ch[idx]


@dataclass(frozen=True, eq=False)
class CensoringModel:
    """Fitted censoring distribution.

    Attributes
    ----------
    kind : {"km", "cox"}
    strata : tuple of Stratum
        One entry for the unstratified product-limit and Cox models.
    strata_vars : tuple of int
        Covariate columns defining product-limit strata.
    strata_keys : tuple
        Covariate values identifying each stratum.
    theta : ndarray
        Log hazard ratios (Cox only; empty otherwise).
    cov_idx : tuple of int
        Columns of ``Z`` entering the Cox model.
    information : ndarray
        Raw observed information at ``theta`` (Cox only).
    """

    kind: str
    strata: tuple[Stratum, ...]
    strata_vars: tuple[int, ...] = ()
    strata_keys: tuple = ((),)
    theta: np.ndarray = np.zeros(0)
    cov_idx: tuple[int, ...] = ()
    information: np.ndarray = np.zeros((0, 0))
    iterations: int = 0

    @property
    def n_jumps(self) -> int:
        return sum(s.times.size for s in self.strata)

    def stratum_of(self, Z) -> np.ndarray:
        """Stratum index for each row of ``Z``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if not self.strata_vars:
            return np.zeros(Z.shape[0], dtype=np.intp)
        lookup = {k: i for i, k in enumerate(self.strata_keys)}
        out = np.empty(Z.shape[0], dtype=np.intp)
        for r, row in enumerate(Z[:, list(self.strata_vars)]):
            key = tuple(row)
            if key not in lookup:
                raise CensoringError(f"no censoring stratum for covariate values {key}")
            out[r] = lookup[key]
        return out

    def risk_score(self, Z) -> np.ndarray:
        """``exp(theta'Z)`` per row (ones for product-limit)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.kind != "cox" or not self.cov_idx:
            return np.ones(Z.shape[0])
        return np.exp(Z[:, list(self.cov_idx)] @ self.theta)

    def cumhaz_before(self, t, Z) -> np.ndarray:
        """Cumulative censoring hazard over jumps before ``t``, per row."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (Z.shape[0],) + np.shape(t)[1:])
        st = self.stratum_of(Z)
        out = np.zeros(t.shape)
        for s, strat in enumerate(self.strata):
            rows = st == s
            if np.any(rows):
                out[rows] = strat.cumhaz_before(t[rows])
        return out

    def survival(self, t, Z) -> np.ndarray:
        """``G(t | Z)`` for aligned ``t`` and rows of ``Z``.

        ``t`` may be shape ``(n,)`` or ``(n, V)``.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        t = np.asarray(t, dtype=float)
        t = np.broadcast_to(t, (Z.shape[0],) + t.shape[1:]) if t.ndim else np.full(Z.shape[0], float(t))
        if self.kind == "cox":
            r = self.risk_score(Z)
            lam = self.cumhaz_before(t, Z)
            return np.exp(-lam * (r if t.ndim == 1 else r[:, None]))
        st = self.stratum_of(Z)
        out = np.ones(t.shape)
        for s, strat in enumerate(self.strata):
            rows = st == s
            if np.any(rows) and strat.times.size:
                surv = np.concatenate([[1.0], np.cumprod(1.0 - strat.dlam)])
                out[rows] = surv[np.searchsorted(strat.times, t[rows], side="left")]
        return out


# fitting -------------------------------------------------------------------


def _censoring_counts(U: np.ndarray, delta: np.ndarray):
    cens = delta == 0
    times, counts = np.unique(U[cens], return_counts=True)
    return times, counts.astype(float)


def _at_risk_sums(U: np.ndarray, values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``sum_j I(U_j >= u) values_j`` for each ``u`` in ``times``."""
    order = np.argsort(U, kind="stable")
    Us = U[order]
    v = values[order]
    tail = np.concatenate([np.cumsum(v[::-1], axis=0)[::-1], np.zeros((1,) + v.shape[1:])])
    return tail[np.searchsorted(Us, times, side="left")]


def _resolve_columns(data: EventDataset, cols) -> tuple[int, ...]:
    if cols is None:
        return ()
    out = []
    for c in cols:
        if isinstance(c, str):
            if c not in data.covariate_names:
                raise KeyError(f"unknown covariate {c!r}")
            out.append(data.covariate_names.index(c))
        else:
            out.append(int(c))
    return tuple(out)


def fit_km_censoring(data: EventDataset, strata: Sequence | None = None) -> CensoringModel:
    """Product-limit estimate of the censoring survival function.

    Parameters
    ----------
    data : EventDataset
    strata : sequence of str or int, optional
        Covariates whose distinct value combinations define separate
        product-limit curves.
    """
    if data.n == 0:
        raise CensoringError("no subjects")
    svars = _resolve_columns(data, strata)
    if svars:
        keys_arr = data.Z[:, list(svars)]
        keys = sorted({tuple(k) for k in keys_arr})
    else:
        keys = [()]
    out = []
    for key in keys:
        rows = np.all(data.Z[:, list(svars)] == np.asarray(key), axis=1) if svars else np.ones(data.n, bool)
        U, delta = data.U[rows], data.delta[rows]
        times, counts = _censoring_counts(U, delta)
        at_risk = _at_risk_sums(U, np.ones(U.size), times)
        out.append(Stratum(times, counts / at_risk, counts, at_risk, np.zeros((times.size, 0))))
    return CensoringModel("km", tuple(out), strata_vars=svars, strata_keys=tuple(keys))


def _cox_pieces(U, Zc, theta, times, counts, cens_mask):
    r = np.exp(Zc @ theta)
    rz = r[:, None] * Zc
    rzz = rz[:, :, None] * Zc[:, None, :]
    s0 = _at_risk_sums(U, r, times)
    s1 = _at_risk_sums(U, rz, times)
    s2 = _at_risk_sums(U, rzz, times)
    zbar = s1 / s0[:, None]
    loglik = float(np.sum(Zc[cens_mask] @ theta) - np.sum(counts * np.log(s0)))
    score = Zc[cens_mask].sum(axis=0) - counts @ zbar
    info = np.einsum("m,mab->ab", counts / s0, s2) - np.einsum("m,ma,mb->ab", counts, zbar, zbar)
    return loglik, score, info, s0, zbar


def fit_cox_censoring(
    data: EventDataset,
    covariates: Sequence | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> CensoringModel:
    """Proportional-hazards censoring model with a Breslow baseline.

    Newton-Raphson from ``theta = 0`` with step halving whenever the log
    partial likelihood decreases.

    Parameters
    ----------
    data : EventDataset
    covariates : sequence of str or int, optional
        Columns of ``Z`` entering the model.  ``None`` uses every column;
        an empty sequence fits the baseline only (Nelson-Aalen form).
    tol : float
        Convergence tolerance on the max-norm of the score.
    max_iter : int

    Raises
    ------
    NoCensoringEventsError, SingularInformationError, CoxConvergenceError
    """
    cov_idx = tuple(range(data.p)) if covariates is None else _resolve_columns(data, covariates)
    U, delta = data.U, data.delta
    times, counts = _censoring_counts(U, delta)
    if times.size == 0:
        raise NoCensoringEventsError("no censoring events to fit a censoring model")
    Zc = data.Z[:, list(cov_idx)]
    cens = delta == 0
    q = len(cov_idx)
    theta = np.zeros(q)
    it = 0
    if q:
        loglik, score, info, _, _ = _cox_pieces(U, Zc, theta, times, counts, cens)
        scale = max(1.0, float(np.abs(np.diag(info)).max()))
        if np.linalg.eigvalsh(info).min() <= 1e-10 * scale:
            raise SingularInformationError("singular information in censoring model (zero-variance covariate?)")
        while True:
            try:
                step = np.linalg.solve(info, score)
            except np.linalg.LinAlgError:
                raise CoxConvergenceError("censoring model information became singular (monotone likelihood?)") from None
            # a tiny score alone is not enough: under a monotone likelihood the
            # score decays while the Newton step stays of order one
            if np.abs(score).max() <= tol and np.abs(step).max() <= 1e-6:
                break
            if it >= max_iter:
                raise CoxConvergenceError(f"censoring model did not converge in {max_iter} iterations")
            it += 1
            for _ in range(30):
                cand = theta + step
                new = _cox_pieces(U, Zc, cand, times, counts, cens)
                if np.isfinite(new[0]) and new[0] >= loglik - 1e-12 * abs(loglik):
                    break
                step = step / 2
            theta = cand
            loglik, score, info = new[0], new[1], new[2]
            if not np.all(np.isfinite(theta)) or np.abs(theta).max() > 1e3:
                raise CoxConvergenceError("censoring model coefficients diverge (monotone likelihood)")
    _, _, info, s0, zbar = _cox_pieces(U, Zc, theta, times, counts, cens)
    strat = Stratum(times, counts / s0, counts, s0, zbar)
    return CensoringModel(
        "cox",
        (strat,),
        theta=theta,
        cov_idx=cov_idx,
        information=info,
        iterations=it,
    )


def no_censoring_model() -> CensoringModel:
    """Model with ``G == 1`` (used when the data contain no censoring)."""
    empty = Stratum(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 0)))
    return CensoringModel("km", (empty,))


def cox_score(data: EventDataset, model: CensoringModel) -> np.ndarray:
    """Partial-likelihood score of a fitted Cox model at its estimate."""
    times, counts = _censoring_counts(data.U, data.delta)
    Zc = data.Z[:, list(model.cov_idx)]
    return _cox_pieces(data.U, Zc, model.theta, times, counts, data.delta == 0)[1]


# evaluation ------------------------------------------------------------------


def survival_at(model: CensoringModel, t, Z) -> np.ndarray | float:
    """``G(t | Z)``; scalar in, scalar out."""
    scalar = np.ndim(t) == 0 and np.ndim(Z) <= 1
    out = model.survival(np.atleast_1d(np.asarray(t, float)), np.atleast_2d(Z))
    return float(out[0]) if scalar else out


def ipcw_weights(
    model: CensoringModel,
    U,
    delta,
    Z,
    times,
    *,
    eps: float = 1e-6,
    cap: float | None = None,
) -> np.ndarray:
    """Inverse-probability-of-censoring weights for every subject and time.

    The weight at ``t`` is ``{I(U <= t) delta + I(U > t)} / G(min(U, t) | Z)``.

    Parameters
    ----------
    cap : float, optional
        Upper bound applied to the weights (truncation).

    Returns
    -------
    ndarray of shape ``(n, len(times))``

    Raises
    ------
    PositivityError
        If some nonzero numerator meets ``G < eps``.
    """
    U = np.asarray(U, dtype=float)
    delta = np.asarray(delta)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    num = np.where(U[:, None] <= times[None, :], (delta == 1)[:, None], True).astype(float)
    s = np.minimum(U[:, None], times[None, :])
    G = model.survival(s, Z)
    bad = (num > 0) & (G < eps)
    if np.any(bad):
        i, v = np.argwhere(bad)[0]
        raise PositivityError(
            f"censoring survival {G[i, v]:.3g} below {eps:g} at time {s[i, v]:g} (subject index {i})"
        )
    w = np.divide(num, G, out=np.zeros_like(num), where=num > 0)
    if cap is not None:
        w = np.minimum(w, cap)
    return w


def ipcw_weight(model: CensoringModel, subject: SubjectData, t_v: float, eps: float = 1e-6) -> float:
    """Inverse-probability-of-censoring weight of one subject at ``t_v``."""
    if t_v < 0:
        raise ValueError("t_v must be nonnegative")
    return float(
        ipcw_weights(model, [subject.U], [subject.delta], np.atleast_2d(subject.Z), [t_v], eps=eps)[0, 0]
    )


def martingale_residual_path(model: CensoringModel, subject: SubjectData):
    """Censoring martingale residual of one subject at its stratum's jump times.

    Returns
    -------
    times, values : ndarray
        ``M(u) = I(U <= u, delta = 0) - sum_{u_m <= u} I(U >= u_m) r dLambda(u_m)``.
    """
    Z = np.atleast_2d(subject.Z)
    strat = model.strata[int(model.stratum_of(Z)[0])]
    r = float(model.risk_score(Z)[0])
    u = strat.times
    jump = ((u >= subject.U) & (subject.delta == 0)).astype(float)
    comp = np.cumsum(np.where(u <= subject.U, r * strat.dlam, 0.0))
    return u, jump - comp
