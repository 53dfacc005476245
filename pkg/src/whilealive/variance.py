"""Influence functions and sandwich covariance for the stacked estimator.

Each subject's influence combines the direct weighted residual with the
first-order effect of estimating the censoring distribution.  Writing
``a_iv = w_iv X_iv {L_i(t_v) - eta^{-1}(gamma'X_iv) s_iv}`` with
``s_iv = min(U_i, t_v)`` and ``r_i = exp(theta'Z_i)``, a perturbation of the
fitted censoring model changes ``1 / G(s | Z_i)`` by

    (1 / G) r_i {dLambda0(s-) + Lambda0(s-) Z_i' dtheta},

and the Breslow (or Nelson-Aalen) baseline moves by

    dLambda0(s) = sum_j sum_{u_m <= s} dM_j(u_m) / S0(u_m) - H(s)' dtheta,
    H(s) = sum_{u_m <= s} zbar(u_m) dLambda0(u_m).

Collecting terms gives, for subject ``j``,

    phi_j = sum_v a_jv + sum_m dM_j(u_m) Kbar(u_m) / S0(u_m) + K_theta I^{-1} xi_j

with ``Kbar(u) = sum_{i,v} a_iv r_i I(s_iv > u)``,
``K_theta = sum_{i,v} a_iv r_i {Lambda0(s_iv-) Z_i - H(s_iv-)}'`` and
``xi_j = sum_m (Z_j - zbar(u_m)) dM_j(u_m)`` the partial-likelihood score
contribution.  For the product-limit model ``log G`` is a sum of
``log(1 - dLambda)``, so each jump term is further divided by
``1 - dLambda(u_m)``; this is the exact linearisation of the estimator and
agrees with the cumulative-hazard form to first order.  All sums are raw
(unnormalised), so the result does not depend on how risk-set averages are
scaled.  The product-limit model is otherwise the special case ``theta = 0`` with per-stratum risk sets and no ``xi`` term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .censoring import CensoringModel, SingularInformationError

if TYPE_CHECKING:
    from .data import EventDataset
    from .estimator import FitSpec, StackedProblem


class SingularOmegaError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class SandwichVariance:
    """``omega`` and ``meat`` are per-unit averages; ``vcov = omega^-1 meat omega^-T / N``."""

    omega: np.ndarray
    meat: np.ndarray
    vcov: np.ndarray
    n_units: int
    influence: np.ndarray | None = None


def _problem(gamma, data, spec, censoring):
    from .estimator import StackedProblem

    return StackedProblem(data, spec, censoring)


def omega_hat(gamma, data: EventDataset, spec: FitSpec, censoring: CensoringModel) -> np.ndarray:
    """Plug-in slope matrix; the negative of the score Jacobian."""
    return -_problem(gamma, data, spec, censoring).jacobian(gamma)


def _row_terms(problem: StackedProblem, gamma) -> np.ndarray:
    return problem.X * (problem.w * problem.residuals(gamma))[:, None]


def influence_from_problem(problem: StackedProblem, gamma) -> np.ndarray:
    """Per-subject influence functions, shape ``(n, p * R)``."""
    data, model = problem.data, problem.censoring
    n, dim = data.n, problem.dim
    a = _row_terms(problem, gamma)
    phi = np.zeros((n, dim))
    np.add.at(phi, problem.subject, a)
    if model.n_jumps == 0:
        return phi

    cox = model.kind == "cox" and len(model.cov_idx) > 0
    r_subj = model.risk_score(data.Z)
    stratum = model.stratum_of(data.Z)
    row_stratum = stratum[problem.subject]
    b = a * r_subj[problem.subject][:, None]
    s_row = problem.E
    if cox:
        Zc = data.Z[:, list(model.cov_idx)]
        q = Zc.shape[1]
        k_theta = np.zeros((dim, q))

    for s, strat in enumerate(model.strata):
        u = strat.times
        if u.size == 0:
            continue
        rows = np.flatnonzero(row_stratum == s)
        subj = np.flatnonzero(stratum == s)
        # Kbar(u_m): sum of b over rows with s_row > u_m
        order = rows[np.argsort(s_row[rows], kind="stable")]
        s_sorted = s_row[order]
        tail = np.concatenate([np.cumsum(b[order][::-1], axis=0)[::-1], np.zeros((1, dim))])
        kbar = tail[np.searchsorted(s_sorted, u, side="right")]
        term = kbar / strat.s0[:, None]
        if model.kind == "km":
            # exact derivative of the product-limit form: d log(1 - dLambda)
            # carries a 1 / (1 - dLambda) factor; Kbar vanishes where dLambda = 1
            keep = strat.dlam < 1
            term = np.where(keep[:, None], term / np.where(keep, 1 - strat.dlam, 1)[:, None], 0.0)
        # dM_j(u_m) = dN_j(u_m) - I(U_j >= u_m) r_j dLambda(u_m)
        last = np.searchsorted(u, data.U[subj], side="right") - 1  # last jump <= U_j
        cum = np.vstack([np.zeros((1, dim)), np.cumsum(term * strat.dlam[:, None], axis=0)])
        corr = -r_subj[subj][:, None] * cum[last + 1]
        cens = (data.delta[subj] == 0) & (last >= 0)
        hit = cens & (u[np.maximum(last, 0)] == data.U[subj])
        corr[hit] += term[last[hit]]
        phi[subj] += corr

        if cox:
            zbar = strat.zbar
            lam_before = np.concatenate([[0.0], np.cumsum(strat.dlam)])
            H_before = np.vstack([np.zeros((1, q)), np.cumsum(zbar * strat.dlam[:, None], axis=0)])
            idx = np.searchsorted(u, s_row[rows], side="left")  # jumps strictly before s
            i_rows = problem.subject[rows]
            pert = lam_before[idx][:, None] * Zc[i_rows] - H_before[idx]
            k_theta += b[rows].T @ pert

    if cox:
        try:
            info_inv = np.linalg.inv(model.information)
        except np.linalg.LinAlgError:
            raise SingularInformationError("censoring information matrix is singular") from None
        strat = model.strata[0]
        u = strat.times
        lam = np.concatenate([[0.0], np.cumsum(strat.dlam)])
        H = np.vstack([np.zeros((1, Zc.shape[1])), np.cumsum(strat.zbar * strat.dlam[:, None], axis=0)])
        last = np.searchsorted(u, data.U, side="right") - 1
        xi = -r_subj[:, None] * (Zc * lam[last + 1][:, None] - H[last + 1])
        cens = (data.delta == 0) & (last >= 0)
        hit = cens & (u[np.maximum(last, 0)] == data.U)
        xi[hit] += Zc[hit] - strat.zbar[last[hit]]
        phi += xi @ (k_theta @ info_inv).T
    return phi


def sandwich(omega, influences, clusters=None) -> SandwichVariance:
    """Sandwich covariance from per-unit averaged ``omega`` and raw influences.

    Parameters
    ----------
    omega : ndarray
        Slope matrix averaged over units.
    influences : ndarray, shape (n, d)
        Per-subject influence functions.
    clusters : array_like of int, optional
        Cluster code per subject; influences are summed within clusters.
    """
    phi = np.asarray(influences, dtype=float)
    if clusters is None:
        psi = phi
    else:
        codes = np.unique(np.asarray(clusters), return_inverse=True)[1]
        psi = np.zeros((codes.max() + 1, phi.shape[1]))
        np.add.at(psi, codes, phi)
    N = psi.shape[0]
    meat = psi.T @ psi / N
    try:
        inv = np.linalg.inv(omega)
    except np.linalg.LinAlgError:
        raise SingularOmegaError("slope matrix is singular; covariance unavailable") from None
    vcov = inv @ meat @ inv.T / N
    return SandwichVariance(omega=omega, meat=meat, vcov=0.5 * (vcov + vcov.T), n_units=N, influence=phi)


def sandwich_from_problem(problem: StackedProblem, gamma) -> SandwichVariance:
    phi = influence_from_problem(problem, gamma)
    clusters = problem.data.cluster_codes if problem.data.cluster_mode else None
    return sandwich(-problem.jacobian(gamma), phi, clusters)


def influence_functions(gamma, data: EventDataset, spec: FitSpec, censoring: CensoringModel) -> np.ndarray:
    """All per-subject influence functions at ``gamma``."""
    return influence_from_problem(_problem(gamma, data, spec, censoring), gamma)


def influence_cox(i: int, gamma, data, spec, cox_model: CensoringModel) -> np.ndarray:
    """Influence function of subject ``i`` under a proportional-hazards censoring model."""
    if cox_model.kind != "cox":
        raise ValueError("influence_cox needs a proportional-hazards censoring model")
    return influence_functions(gamma, data, spec, cox_model)[i]


def influence_km(i: int, gamma, data, spec, km_model: CensoringModel) -> np.ndarray:
    """Influence function of subject ``i`` under a product-limit censoring model."""
    if km_model.kind != "km":
        raise ValueError("influence_km needs a product-limit censoring model")
    return influence_functions(gamma, data, spec, km_model)[i]
