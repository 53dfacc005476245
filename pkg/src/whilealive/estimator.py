"""Stacked inverse-probability-weighted estimating equation for while-alive rates.

For a grid of horizons ``t_1 < ... < t_V`` the loss rate on ``[0, t_v]`` is
modelled as ``eta^{-1}(beta(t_v)'Z)`` with ``beta_j(t) = sum_r gamma_{jr} J_r(t)``.
The estimating function is

    U(gamma) = N^{-1} sum_i sum_v w_iv X_iv {L_i(t_v) - eta^{-1}(gamma'X_iv) min(U_i, t_v)}

with ``X_iv = kron(Z_i, J(t_v))``, ``w_iv`` the censoring weight and ``N`` the
number of independent units (subjects, or clusters under working
independence).  The score is the negative gradient of the convex objective

    Q(gamma) = N^{-1} sum w {min(U, t) F(gamma'X) - L gamma'X},

with ``F = exp`` (log link) or ``F(x) = x^2 / 2`` (identity link), which the
Newton iterations use for step halving.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import variance as _variance
from .basis import BasisConfig, beta_at, expand_design
from .censoring import (
    CensoringModel,
    fit_cox_censoring,
    fit_km_censoring,
    ipcw_weights,
    no_censoring_model,
)
from .data import EventDataset, WeightScheme


class EstimationError(RuntimeError):
    """Base class for estimator failures."""


class NoRootError(EstimationError):
    pass


class SingularJacobianError(EstimationError):
    pass


class ConvergenceError(EstimationError):
    pass


class GridError(EstimationError):
    pass


# links -----------------------------------------------------------------------


@dataclass(frozen=True)
class LinkFunction:
    """Monotone link ``eta`` with inverse and inverse derivative."""

    name: str

    def __post_init__(self):
        if self.name not in ("log", "identity"):
            raise ValueError(f"unsupported link {self.name!r}; use 'log' or 'identity'")

    def link(self, m):
        return np.log(m) if self.name == "log" else np.asarray(m, dtype=float)

    def inverse(self, x):
        return np.exp(x) if self.name == "log" else np.asarray(x, dtype=float)

    def inverse_deriv(self, x):
        return np.exp(x) if self.name == "log" else np.ones_like(np.asarray(x, dtype=float))

    def antiderivative(self, x):
        """Primitive of the inverse link, used for the Newton merit."""
        return np.exp(x) if self.name == "log" else 0.5 * np.asarray(x, dtype=float) ** 2


def get_link(link: str | LinkFunction) -> LinkFunction:
    return link if isinstance(link, LinkFunction) else LinkFunction(link)


# specification -------------------------------------------------------------------


@dataclass(frozen=True)
class CensoringSpec:
    """How to estimate the censoring distribution.

    Parameters
    ----------
    method : {"km", "cox"}
    covariates : sequence of str, optional
        Cox model covariates.  ``None`` uses every non-constant model column.
    strata : sequence of str
        Product-limit strata (km only).
    eps : float
        Positivity floor for ``G``.
    cap_quantile : float, optional
        Truncate weights at this quantile of the positive weights.
    """

    method: str = "km"
    covariates: tuple[str, ...] | None = None
    strata: tuple[str, ...] = ()
    eps: float = 1e-6
    cap_quantile: float | None = None

    def __post_init__(self):
        if self.method not in ("km", "cox"):
            raise ValueError(f"unknown censoring method {self.method!r}; use 'km' or 'cox'")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "strata", tuple(self.strata))
        if self.cap_quantile is not None and not 0 < self.cap_quantile <= 1:
            raise ValueError("cap_quantile must lie in (0, 1]")

    def fit(self, data: EventDataset) -> CensoringModel:
        """Fit the censoring model; ``G == 1`` when nothing is censored."""
        if not np.any(data.delta == 0):
            return no_censoring_model()
        if self.method == "km":
            return fit_km_censoring(data, strata=self.strata or None)
        cols = self.covariates
        if cols is None:
            cols = tuple(
                nm for j, nm in enumerate(data.covariate_names) if np.ptp(data.Z[:, j]) > 0
            )
        return fit_cox_censoring(data, covariates=cols)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "covariates": None if self.covariates is None else list(self.covariates),
            "strata": list(self.strata),
            "eps": self.eps,
            "cap_quantile": self.cap_quantile,
        }


@dataclass(frozen=True)
class FitSpec:
    """Everything that defines a stacked fit apart from the data."""

    basis: BasisConfig
    tau_grid: tuple[float, ...]
    weights: WeightScheme
    link: LinkFunction = LinkFunction("log")
    censoring: CensoringSpec = field(default_factory=CensoringSpec)

    def __post_init__(self):
        grid = tuple(float(t) for t in np.atleast_1d(self.tau_grid))
        object.__setattr__(self, "tau_grid", grid)
        object.__setattr__(self, "link", get_link(self.link))
        if not grid:
            raise ValueError("tau_grid is empty")
        g = np.asarray(grid)
        if np.any(g <= 0) or np.any(np.diff(g) <= 0):
            raise ValueError("tau_grid must be positive and strictly increasing")

    @classmethod
    def default(cls, basis: BasisConfig, weights: WeightScheme, **kw) -> FitSpec:
        """Spec whose stacking grid is the positive knots of ``basis``."""
        grid = tuple(k for k in basis.knots if k > 0)
        return cls(basis=basis, tau_grid=grid, weights=weights, **kw)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.to_dict(),
            "tau_grid": list(self.tau_grid),
            "weights": {"recur": list(self.weights.w_recur), "term": self.weights.w_term},
            "link": self.link.name,
            "censoring": self.censoring.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FitSpec:
        c = d.get("censoring", {})
        return cls(
            basis=BasisConfig.from_dict(d["basis"]),
            tau_grid=tuple(d["tau_grid"]),
            weights=WeightScheme(tuple(d["weights"]["recur"]), d["weights"]["term"]),
            link=LinkFunction(d.get("link", "log")),
            censoring=CensoringSpec(
                method=c.get("method", "km"),
                covariates=None if c.get("covariates") is None else tuple(c["covariates"]),
                strata=tuple(c.get("strata", ())),
                eps=c.get("eps", 1e-6),
                cap_quantile=c.get("cap_quantile"),
            ),
        )


# the stacked problem -----------------------------------------------------------


class StackedProblem:
    """Stacked design rows with positive weight, ready for score evaluation.

    Attributes
    ----------
    subject, batch : ndarray of int
        Subject index and grid index of every retained row.
    X : ndarray, shape (m, p * R)
    w, L, E : ndarray
        Weight, cumulative loss and exposure ``min(U, t_v)`` per row.
    n_units : int
        Number of independent units used to normalise.
    """

    def __init__(self, data: EventDataset, spec: FitSpec, censoring: CensoringModel):
        times = np.asarray(spec.tau_grid)
        if times[-1] > data.U.max():
            raise GridError(
                f"stacking time {times[-1]:g} exceeds the largest observed follow-up {data.U.max():g}"
            )
        self.data, self.spec, self.censoring = data, spec, censoring
        self.link = spec.link
        W = ipcw_weights(censoring, data.U, data.delta, data.Z, times, eps=spec.censoring.eps)
        if spec.censoring.cap_quantile is not None and np.any(W > 0):
            W = np.minimum(W, np.quantile(W[W > 0], spec.censoring.cap_quantile))
        L = data.loss_matrix(spec.weights, times)
        E = np.minimum(data.U[:, None], times[None, :])
        self.J = spec.basis.evaluate(times)
        i, v = np.nonzero(W > 0)
        self.subject, self.batch = i, v
        self.w, self.L, self.E = W[i, v], L[i, v], E[i, v]
        self.X = expand_design(data.Z[i], self.J[v])
        self.n_units = data.n_units
        self.dim = data.p * spec.basis.R

    def linear_predictor(self, gamma) -> np.ndarray:
        return self.X @ np.asarray(gamma, dtype=float)

    def residuals(self, gamma) -> np.ndarray:
        """``L - eta^{-1}(gamma'X) E`` per retained row."""
        return self.L - self.link.inverse(self.linear_predictor(gamma)) * self.E

    def score(self, gamma) -> np.ndarray:
        return self.X.T @ (self.w * self.residuals(gamma)) / self.n_units

    def jacobian(self, gamma) -> np.ndarray:
        d = self.w * self.link.inverse_deriv(self.linear_predictor(gamma)) * self.E
        return -(self.X.T * d) @ self.X / self.n_units

    def merit(self, gamma) -> float:
        x = self.linear_predictor(gamma)
        return float(np.sum(self.w * (self.E * self.link.antiderivative(x) - self.L * x)) / self.n_units)


def stacked_score(gamma, data: EventDataset, spec: FitSpec, censoring: CensoringModel) -> np.ndarray:
    """Stacked estimating function evaluated at ``gamma``."""
    return StackedProblem(data, spec, censoring).score(gamma)


def score_jacobian(gamma, data: EventDataset, spec: FitSpec, censoring: CensoringModel) -> np.ndarray:
    """Analytic derivative of :func:`stacked_score` with respect to ``gamma``."""
    return StackedProblem(data, spec, censoring).jacobian(gamma)


# fitting -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted stacked model.

    ``gamma`` is covariate-major (entry ``j * R + r``); ``vcov`` is its
    sandwich covariance, already divided by the number of units.
    """

    gamma: np.ndarray
    vcov: np.ndarray | None
    spec: FitSpec
    covariate_names: tuple[str, ...]
    n_subjects: int
    n_units: int
    cluster_mode: bool
    iterations: int
    score_norm: float
    omega: np.ndarray | None = None
    meat: np.ndarray | None = None
    censoring: CensoringModel | None = None
    influence: np.ndarray | None = field(default=None, repr=False)
    followup: np.ndarray | None = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def R(self) -> int:
        return self.spec.basis.R

    def beta(self, t) -> np.ndarray:
        return beta_at(self.gamma, self.spec.basis, t)

    def block(self, j: int) -> slice:
        return slice(j * self.R, (j + 1) * self.R)

    def to_dict(self) -> dict:
        return {
            "est": self.gamma.tolist(),
            "vcov": None if self.vcov is None else self.vcov.tolist(),
            "covariates": list(self.covariate_names),
            "spec": self.spec.to_dict(),
            "diagnostics": {
                "n_subjects": self.n_subjects,
                "n_units": self.n_units,
                "cluster_mode": self.cluster_mode,
                "iterations": self.iterations,
                "score_norm": self.score_norm,
                "censoring": None
                if self.censoring is None
                else {
                    "kind": self.censoring.kind,
                    "jumps": self.censoring.n_jumps,
                    "theta": self.censoring.theta.tolist(),
                },
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> FitResult:
        diag = d.get("diagnostics", {})
        return cls(
            gamma=np.asarray(d["est"], dtype=float),
            vcov=None if d.get("vcov") is None else np.asarray(d["vcov"], dtype=float),
            spec=FitSpec.from_dict(d["spec"]),
            covariate_names=tuple(d["covariates"]),
            n_subjects=diag.get("n_subjects", 0),
            n_units=diag.get("n_units", 0),
            cluster_mode=diag.get("cluster_mode", False),
            iterations=diag.get("iterations", 0),
            score_norm=diag.get("score_norm", math.nan),
        )


def _initial_gamma(problem: StackedProblem) -> np.ndarray:
    gamma = np.zeros(problem.dim)
    if problem.link.name != "log":
        return gamma
    data, spec = problem.data, problem.spec
    tau = spec.tau_grid[-1]
    exposure = np.minimum(data.U, tau).sum()
    total = data.loss_matrix(spec.weights, [tau]).sum()
    if total <= 0 or exposure <= 0:
        return gamma
    R = spec.basis.R
    target = np.full(len(spec.tau_grid), math.log(total / exposure))
    coef = np.linalg.lstsq(problem.J, target, rcond=None)[0]
    for j in range(data.p):
        if np.all(data.Z[:, j] == 1.0):
            gamma[j * R : (j + 1) * R] = coef
            break
    return gamma


def _check_rank(problem: StackedProblem) -> None:
    if problem.X.shape[0] == 0:
        raise SingularJacobianError("no stacked rows carry positive weight (rank-deficient design)")
    gram = (problem.X.T * (problem.w * problem.E)) @ problem.X
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-10 * max(ev[-1], 1e-300):
        raise SingularJacobianError(
            "singular Jacobian: rank-deficient stacked design (a basis block may be inactive on the grid)"
        )


def solve(
    data: EventDataset,
    spec: FitSpec,
    censoring: CensoringModel | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 100,
    variance: bool = True,
) -> FitResult:
    """Solve the stacked estimating equation by damped Newton iterations.

    Parameters
    ----------
    data : EventDataset
    spec : FitSpec
    censoring : CensoringModel, optional
        Pre-fitted censoring model; fitted from ``spec.censoring`` if omitted.
    tol : float
        Stop once the max-norm of the score is at most ``tol``.
    max_iter : int
    variance : bool
        Attach the sandwich covariance.

    Raises
    ------
    NoRootError, SingularJacobianError, ConvergenceError, GridError
    """
    if censoring is None:
        censoring = spec.censoring.fit(data)
    problem = StackedProblem(data, spec, censoring)
    if spec.link.name == "log" and not np.any(problem.w * problem.L > 0):
        raise NoRootError("score has no root under log link (no weighted events)")
    _check_rank(problem)

    gamma = _initial_gamma(problem)
    score = problem.score(gamma)
    q = problem.merit(gamma)
    it = 0
    while np.abs(score).max() > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"stacked equation did not converge in {max_iter} iterations "
                f"(score max-norm {np.abs(score).max():.3g})"
            )
        it += 1
        try:
            step = np.linalg.solve(-problem.jacobian(gamma), score)
        except np.linalg.LinAlgError:
            raise SingularJacobianError("singular Jacobian during Newton iterations") from None
        for _ in range(30):
            cand = gamma + step
            q_new = problem.merit(cand)
            if np.isfinite(q_new) and q_new <= q + 1e-14 * abs(q):
                break
            step = step / 2
        else:
            raise ConvergenceError("step halving failed to decrease the objective")
        gamma, q = cand, q_new
        score = problem.score(gamma)

    omega = meat = vcov = phi = None
    if variance:
        sw = _variance.sandwich_from_problem(problem, gamma)
        omega, meat, vcov, phi = sw.omega, sw.meat, sw.vcov, sw.influence
    return FitResult(
        gamma=gamma,
        vcov=vcov,
        spec=spec,
        covariate_names=data.covariate_names,
        n_subjects=data.n,
        n_units=data.n_units,
        cluster_mode=data.cluster_mode,
        iterations=it,
        score_norm=float(np.abs(score).max()),
        omega=omega,
        meat=meat,
        censoring=censoring,
        influence=phi,
        followup=np.sort(data.U),
    )


def fit_landmark(
    data: EventDataset,
    t: float,
    weights: WeightScheme,
    link: str | LinkFunction = "log",
    censoring: CensoringSpec | CensoringModel | None = None,
    covariates: Sequence[str] | None = None,
    intercept: bool = False,
    **kw,
) -> FitResult:
    """Single-horizon fit: ``beta(t)`` itself with its sandwich covariance.

    Equivalent to :func:`solve` with a time-fixed basis and ``tau_grid = (t,)``.
    """
    if covariates is not None or intercept:
        data = data.with_covariates(covariates if covariates is not None else data.covariate_names, intercept)
    model = censoring if isinstance(censoring, CensoringModel) else None
    cspec = censoring if isinstance(censoring, CensoringSpec) else CensoringSpec()
    spec = FitSpec(
        basis=BasisConfig("time-fixed", (0.0, float(t))),
        tau_grid=(float(t),),
        weights=weights,
        link=get_link(link),
        censoring=cspec,
    )
    return solve(data, spec, censoring=model, **kw)

