"""Time bases ``J(t)`` for time-varying coefficients and the stacked design.

Coefficients are stored covariate-major: entry ``j * R + r`` of the stacked
vector multiplies ``Z_j * J_r(t)``, so that the design row is
``kron(Z, J(t))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FAMILY_CODES = {
    "st": "step",
    "bz": "bspline",
    "ns": "natural-spline",
    "ms": "mspline",
    "pl": "piecewise-poly",
    "tl": "truncated-linear",
    "il": "interval-linear",
    "tf": "time-fixed",
}
CODE_OF = {v: k for k, v in FAMILY_CODES.items()}


def _family_name(family: str) -> str:
    f = family.strip().lower()
    if f in FAMILY_CODES:
        return FAMILY_CODES[f]
    if f in CODE_OF:
        return f
    raise ValueError(f"unknown basis family {family!r}; use one of {sorted(FAMILY_CODES)}")


@dataclass(frozen=True)
class BasisConfig:
    """Basis family, degree and knot set.

    Parameters
    ----------
    family : str
        Full family name or its two-letter code (``st, bz, ns, ms, pl, tl,
        il, tf``).
    knots : sequence of float
        Strictly increasing, nonnegative.  For the step family these are the
        thresholds; for the others the first and last entries are boundary
        knots and the rest interior knots.
    degree : int
        Polynomial degree, used by ``bspline``, ``mspline`` and
        ``piecewise-poly`` and ignored by the other families (natural
        splines are always cubic).
    """

    family: str
    knots: tuple[float, ...]
    degree: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", _family_name(self.family))
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "degree", int(self.degree))
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        kn = np.asarray(knots)
        min_len = 1 if self.family == "step" else 2
        if kn.size < min_len:
            raise ValueError(f"{self.family} basis needs at least {min_len} knots")
        if np.any(~np.isfinite(kn)) or np.any(kn < 0):
            raise ValueError("knots must be finite and nonnegative")
        if np.any(np.diff(kn) <= 0):
            raise ValueError("knots must be strictly increasing")
        if self.family == "time-fixed" and kn.size != 2:
            raise ValueError("time-fixed basis takes exactly two boundary knots")
        if self.family in ("bspline", "mspline") and self.degree == 0 and kn.size < 3:
            raise ValueError("degree-0 spline with two knots has no free component")

    @property
    def code(self) -> str:
        return CODE_OF[self.family]

    @property
    def R(self) -> int:
        m = len(self.knots)
        d = self.degree
        return {
            "step": m,
            "bspline": m + d - 2,
            "natural-spline": m,
            "mspline": m + d - 1,
            "piecewise-poly": (m - 1) * (d + 1),
            "truncated-linear": m,
            "interval-linear": m,
            "time-fixed": 1,
        }[self.family]

    def evaluate(self, t) -> np.ndarray:
        return evaluate_basis(self, t)

    def to_dict(self) -> dict:
        return {"family": self.code, "degree": self.degree, "knots": list(self.knots)}

    @classmethod
    def from_dict(cls, d: dict) -> BasisConfig:
        return cls(d["family"], tuple(d["knots"]), d.get("degree", 0))


# B-spline machinery --------------------------------------------------------


def _clamped_knots(knots: np.ndarray, degree: int) -> np.ndarray:
    return np.concatenate([np.repeat(knots[0], degree), knots, np.repeat(knots[-1], degree)])


def bspline_basis(x, knots, degree: int) -> np.ndarray:
    """Full clamped B-spline basis by the Cox-de Boor recursion.

    Parameters
    ----------
    x : array_like
        Points inside ``[knots[0], knots[-1]]``.  The right boundary is
        included in the last interval.
    knots : array_like
        Distinct breakpoints, boundaries included.
    degree : int

    Returns
    -------
    ndarray of shape ``(len(x), len(knots) - 1 + degree)``
    """
    return _padded_basis(x, knots, degree, degree)


def _bspline_second_derivative(x, knots, degree: int) -> np.ndarray:
    """Second derivative of the clamped basis, via the derivative recursion."""
    tk = _clamped_knots(np.asarray(knots, float), degree)

    def deriv(coef_deg, lower):
        # d/dx of degree-p basis expressed through degree-(p-1) basis
        p = coef_deg
        nb = tk.size - 1 - p
        out = np.zeros((lower.shape[0], nb))
        for i in range(nb):
            d1 = tk[i + p] - tk[i]
            d2 = tk[i + p + 1] - tk[i + 1]
            if d1 > 0:
                out[:, i] += p / d1 * lower[:, i]
            if d2 > 0:
                out[:, i] -= p / d2 * lower[:, i + 1]
        return out

    # degree-(d-2) basis padded to the full clamped knot vector length
    low = _padded_basis(x, knots, degree, degree - 2)
    first = deriv(degree - 1, low)
    return deriv(degree, first)


def _padded_basis(x, knots, full_degree: int, degree: int) -> np.ndarray:
    """Degree-``degree`` basis on the knot vector clamped for ``full_degree``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    bk = np.asarray(knots, dtype=float)
    tk = _clamped_knots(bk, full_degree)
    span = np.clip(np.searchsorted(bk, x, side="right") - 1, 0, bk.size - 2)
    B = np.zeros((x.size, tk.size - 1))
    B[np.arange(x.size), span + full_degree] = 1.0
    for k in range(1, degree + 1):
        nb = tk.size - 1 - k
        left_den = tk[k : k + nb] - tk[:nb]
        right_den = tk[k + 1 : k + 1 + nb] - tk[1 : 1 + nb]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(left_den > 0, (x[:, None] - tk[:nb]) / left_den, 0.0)
            b = np.where(right_den > 0, (tk[k + 1 : k + 1 + nb] - x[:, None]) / right_den, 0.0)
        B = a * B[:, :nb] + b * B[:, 1 : nb + 1]
    return B


def _natural_null_space(knots) -> np.ndarray:
    """Columns spanning cubic splines with zero second derivative at both ends."""
    bk = np.asarray(knots, dtype=float)
    C = _bspline_second_derivative(bk[[0, -1]], bk, 3)  # (2, m + 2)
    q, _ = np.linalg.qr(C.T, mode="complete")
    return q[:, 2:]


# public evaluation -----------------------------------------------------------


def evaluate_basis(config: BasisConfig, t) -> np.ndarray:
    """Evaluate ``J(t)``.

    Scalar ``t`` gives a length-``R`` vector; array ``t`` gives an
    ``(len(t), R)`` matrix.  Times past the last knot are clamped to it.

    Raises
    ------
    ValueError
        If any ``t`` is negative.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ValueError("basis evaluated at negative time")
    kn = np.asarray(config.knots)
    tc = np.minimum(t, kn[-1])
    fam, d = config.family, config.degree
    if fam == "step":
        J = (tc[:, None] >= kn[None, :]).astype(float)
    elif fam == "time-fixed":
        J = np.ones((t.size, 1))
    else:
        tc = np.maximum(tc, kn[0])
        if fam == "bspline":
            # The first clamped function is the only one nonzero at the left
            # boundary, so dropping it leaves columns that already vanish at
            # t = 0 (times below the first knot are clamped to it).  Shifting
            # the full basis by J(0) instead would make the columns sum to 0.
            J = bspline_basis(tc, kn, d)[:, 1:]
        elif fam == "mspline":
            B = bspline_basis(tc, kn, d)
            tk = _clamped_knots(kn, d)
            width = tk[d + 1 :] - tk[: -d - 1]
            J = B * ((d + 1) / width)[None, :]
        elif fam == "natural-spline":
            J = bspline_basis(tc, kn, 3) @ _natural_null_space(kn)
        elif fam == "interval-linear":
            J = bspline_basis(tc, kn, 1)
        elif fam == "truncated-linear":
            J = np.column_stack([np.ones_like(tc), tc] + [np.maximum(tc - k, 0.0) for k in kn[1:-1]])
        elif fam == "piecewise-poly":
            span = np.clip(np.searchsorted(kn, tc, side="right") - 1, 0, kn.size - 2)
            J = np.zeros((t.size, config.R))
            local = tc - kn[span]
            for e in range(d + 1):
                J[np.arange(t.size), span * (d + 1) + e] = local**e
        else:  # pragma: no cover - guarded by BasisConfig
            raise ValueError(fam)
    return J[0] if scalar else J


def expand_design(Z, J) -> np.ndarray:
    """Stacked design ``kron(Z, J)``; block ``j`` holds ``Z_j * J``.

    Accepts a single ``Z`` (length p) with a single ``J`` (length R), or
    row-aligned matrices, in which case the Kronecker product is taken row
    by row.
    """
    Z = np.asarray(Z, dtype=float)
    J = np.asarray(J, dtype=float)
    if Z.ndim == 1 and J.ndim == 1:
        return np.kron(Z, J)
    Z2, J2 = np.atleast_2d(Z), np.atleast_2d(J)
    n = max(Z2.shape[0], J2.shape[0])
    return (Z2[:, :, None] * J2[:, None, :]).reshape(n, Z2.shape[1] * J2.shape[1])


def beta_at(gamma, config: BasisConfig, t) -> np.ndarray:
    """Coefficient functions ``beta_j(t) = sum_r gamma_{jr} J_r(t)``.

    Returns shape ``(p,)`` for scalar ``t`` and ``(len(t), p)`` otherwise.
    """
    gamma = np.asarray(gamma, dtype=float)
    R = config.R
    if gamma.size % R:
        raise ValueError("gamma length is not a multiple of R")
    G = gamma.reshape(-1, R)
    J = evaluate_basis(config, t)
    return J @ G.T


def selection_matrix(config: BasisConfig, p: int, t: float) -> np.ndarray:
    """``A(t) = I_p kron J(t)^T``, mapping stacked coefficients to ``beta(t)``."""
    return np.kron(np.eye(p), evaluate_basis(config, float(t))[None, :])
