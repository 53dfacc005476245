"""K-fold selection of the time basis by integrated IPCW prediction error.

For a held-out subject the squared weighted residual

    f_i(s) = [w_i(s) {L_i(s) - eta^{-1}(beta(s)'Z_i) min(U_i, s)}]^2

is integrated over ``[0, tau]`` by the trapezoid rule, using coefficients and
a censoring model fitted without the subject's fold.  Folds partition
clusters when the data are clustered.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisConfig
from .censoring import CensoringError, CensoringModel, ipcw_weights
from .data import EventDataset, WeightScheme
from .estimator import CensoringSpec, EstimationError, FitResult, FitSpec, LinkFunction, solve


class CrossValidationError(RuntimeError):
    pass


def assign_folds(data: EventDataset, K: int, seed: int) -> np.ndarray:
    """Fold label (``0..K-1``) per subject.

    Units (clusters in cluster mode, otherwise subjects) are shuffled with
    ``seed`` and dealt round-robin, so fold sizes differ by at most one unit.
    """
    n_units = data.n_units
    if K < 2:
        raise ValueError("need at least two folds")
    if K > n_units:
        raise ValueError(f"K={K} folds but only {n_units} units")
    perm = np.random.default_rng(seed).permutation(n_units)
    unit_fold = np.empty(n_units, dtype=int)
    unit_fold[perm] = np.arange(n_units) % K
    return unit_fold[data.cluster_codes]


def integration_grid(tau: float, T: int = 100) -> np.ndarray:
    return np.linspace(0.0, tau, T)


def prediction_error(
    heldout: EventDataset,
    trained_fit: FitResult,
    trained_censoring: CensoringModel,
    T_grid,
    eps: float = 1e-6,
) -> float:
    """Trapezoid-integrated squared IPCW residual summed over held-out subjects."""
    s = np.asarray(T_grid, dtype=float)
    w = ipcw_weights(trained_censoring, heldout.U, heldout.delta, heldout.Z, s, eps=eps)
    L = heldout.loss_matrix(trained_fit.spec.weights, s)
    E = np.minimum(heldout.U[:, None], s[None, :])
    beta = trained_fit.beta(s)  # (T, p)
    m = trained_fit.spec.link.inverse(heldout.Z @ beta.T)
    f = (w * (L - m * E)) ** 2
    return float(np.trapezoid(f, s, axis=1).sum())


@dataclass(frozen=True)
class CvConfig:
    family: str
    degree: int
    n_interior: int
    link: str

    def label(self) -> str:
        return f"{self.family}/d{self.degree}/k{self.n_interior}/{self.link}"


@dataclass(frozen=True)
class CvGrid:
    """Candidate configurations and cross-validation settings.

    Parameters
    ----------
    families, degrees, n_interior, links : sequences
        Their Cartesian product defines the candidate configurations.
    knot_scheme : {"equidist", "quantile"}
        Interior knot placement over ``time_range``; quantile knots are
        placed at quantiles of the training split's follow-up times.
    K : int
        Number of folds.
    seed : int
    time_range : (float, float), optional
        Knot range and PE integration window.  By default knots span
        ``(0, top)`` with ``top`` the smallest maximum follow-up among the
        training splits, and the PE integrates over ``[0, max U]``.
    T : int
        Number of trapezoid points for the PE integral.
    n_stack : int
        Size of the default stacking grid, equally spaced on
        ``(t_min, min(t_max, top)]``.
    tau_grid : sequence of float, optional
        Explicit stacking grid overriding ``n_stack``.
    """

    weights: WeightScheme
    families: tuple[str, ...] = ("bz",)
    degrees: tuple[int, ...] = (1,)
    n_interior: tuple[int, ...] = (2,)
    links: tuple[str, ...] = ("log",)
    knot_scheme: str = "equidist"
    K: int = 5
    seed: int = 0
    time_range: tuple[float, float] | None = None
    T: int = 100
    n_stack: int = 20
    tau_grid: tuple[float, ...] | None = None
    censoring: CensoringSpec = field(default_factory=CensoringSpec)

    def __post_init__(self):
        for name in ("families", "degrees", "n_interior", "links"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"{name} is empty")
            object.__setattr__(self, name, vals)
        if self.knot_scheme not in ("equidist", "quantile"):
            raise ValueError("knot_scheme must be 'equidist' or 'quantile'")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.T < 2:
            raise ValueError("T must be at least 2")

    def configurations(self) -> list[CvConfig]:
        return [
            CvConfig(f, int(d), int(k), l)
            for f, d, k, l in itertools.product(self.families, self.degrees, self.n_interior, self.links)
        ]


def build_basis(cfg: CvConfig, t_min: float, t_max: float, scheme: str, U=None) -> BasisConfig:
    """Basis for a configuration on ``[t_min, t_max]``."""
    m = cfg.n_interior
    if scheme == "equidist" or m == 0:
        interior = t_min + (t_max - t_min) * np.arange(1, m + 1) / (m + 1)
    else:
        U = np.asarray(U, dtype=float)
        inside = U[(U > t_min) & (U < t_max)]
        if inside.size < m:
            raise ValueError("too few follow-up times inside the range for quantile knots")
        interior = np.quantile(inside, np.arange(1, m + 1) / (m + 1))
    fam = cfg.family
    if fam in ("tf", "time-fixed"):
        knots = (t_min, t_max)
    elif fam in ("st", "step"):
        knots = (t_min, *interior)
    else:
        knots = (t_min, *interior, t_max)
    return BasisConfig(fam, tuple(float(k) for k in knots), cfg.degree)


@dataclass
class CvResult:
    configs: list[CvConfig]
    pe: np.ndarray  # total PE per configuration (nan when disqualified)
    fold_pe: np.ndarray  # (n_configs, K)
    reasons: list[str | None]
    selected: int
    tau: float
    tau_grid: tuple[float, ...]

    @property
    def best(self) -> CvConfig:
        return self.configs[self.selected]

    def rows(self) -> list[dict]:
        return [
            {
                "index": i,
                "family": c.family,
                "degree": c.degree,
                "n_interior": c.n_interior,
                "link": c.link,
                "pe": float(self.pe[i]),
                "status": "ok" if self.reasons[i] is None else "failed",
                "reason": self.reasons[i] or "",
                "selected": i == self.selected,
            }
            for i, c in enumerate(self.configs)
        ]


def _fit_fold(cfg, grid, train, held, censoring, t_min, t_max, tau_grid, s_grid):
    basis = build_basis(cfg, t_min, t_max, grid.knot_scheme, train.U)
    spec = FitSpec(basis, tau_grid, grid.weights, LinkFunction(cfg.link), grid.censoring)
    fit = solve(train, spec, censoring=censoring, variance=False)
    return prediction_error(held, fit, censoring, s_grid, eps=grid.censoring.eps)


def _run_config(cfg, grid, splits, t_min, t_max, tau_grid, s_grid):
    out = np.full(len(splits), math.nan)
    for b, (train, held, cens) in enumerate(splits):
        if isinstance(cens, Exception):
            return out, f"fold {b}: censoring fit failed: {cens}"
        try:
            out[b] = _fit_fold(cfg, grid, train, held, cens, t_min, t_max, tau_grid, s_grid)
        except (EstimationError, CensoringError, ValueError, np.linalg.LinAlgError) as exc:
            return out, f"fold {b}: {type(exc).__name__}: {exc}"
    return out, None


def select(data: EventDataset, grid: CvGrid, n_jobs: int = 1) -> CvResult:
    """Cross-validated prediction error for every configuration in ``grid``.

    A configuration that fails on any split is disqualified.  The minimum
    total PE wins; ties go to fewer interior knots, then lower degree, then
    earlier position in the grid.
    """
    folds = assign_folds(data, grid.K, grid.seed)
    splits = []
    top = math.inf
    for b in range(grid.K):
        train = data.subset(np.flatnonzero(folds != b))
        held = data.subset(np.flatnonzero(folds == b))
        try:
            cens = grid.censoring.fit(train)
        except (CensoringError, ValueError) as exc:
            cens = exc
        splits.append((train, held, cens))
        top = min(top, float(train.U.max()))
    # without an explicit range, knots stop at the smallest training-split
    # maximum follow-up (observed by every split) while the PE window spans
    # the full data; the basis is clamped beyond its last knot
    if grid.time_range is not None:
        t_min, t_max = grid.time_range
        tau = t_max
    else:
        t_min, t_max, tau = 0.0, top, float(data.U.max())
    if not 0 <= t_min < t_max:
        raise ValueError("time_range must satisfy 0 <= t_min < t_max")
    s_grid = integration_grid(tau, grid.T)
    if grid.tau_grid is not None:
        tau_grid = tuple(float(t) for t in grid.tau_grid)
    else:
        hi = min(t_max, top)
        tau_grid = tuple(t_min + (hi - t_min) * np.arange(1, grid.n_stack + 1) / grid.n_stack)

    configs = grid.configurations()
    if n_jobs == 1 or len(configs) == 1:
        results = [_run_config(c, grid, splits, t_min, t_max, tau_grid, s_grid) for c in configs]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_config)(c, grid, splits, t_min, t_max, tau_grid, s_grid) for c in configs
        )
    fold_pe = np.array([r[0] for r in results]).reshape(len(configs), grid.K)
    reasons = [r[1] for r in results]
    pe = np.where([r is None for r in reasons], fold_pe.sum(axis=1), math.nan)
    ok = [i for i, r in enumerate(reasons) if r is None]
    if not ok:
        raise CrossValidationError("every configuration failed: " + "; ".join(r or "" for r in reasons))
    selected = min(ok, key=lambda i: (pe[i], configs[i].n_interior, configs[i].degree, i))
    return CvResult(configs, pe, fold_pe, reasons, selected, float(s_grid[-1]), tau_grid)

