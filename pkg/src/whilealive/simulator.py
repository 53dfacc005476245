"""Joint-frailty data generation, closed-form while-alive rates and replication studies.

Subjects carry a gamma frailty ``W`` (mean one) and, in clustered designs, a
shared cluster frailty ``B``.  Given covariates ``Z`` the recurrent intensity
of type ``k`` is ``mu_k0(t) B W exp(alpha_k'Z)`` and the death hazard is
``lambda_D0(t) B W^gamma exp(alpha_D'Z)``.  Death is drawn by inverting the
cumulative hazard.  Recurrent events are drawn as a Poisson count with mean
``m Lambda_k0(D)`` whose times are ``Lambda_k0^{-1}(V Lambda_k0(D))`` for
uniform ``V``, which is an exact draw of a nonhomogeneous Poisson process
on ``[0, D]``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import integrate, special

from .basis import BasisConfig
from .censoring import CensoringError
from .data import EventDataset, WeightScheme
from .estimator import CensoringSpec, EstimationError, FitSpec, LinkFunction, get_link, solve
from .inference import effect_curve


class SimulationError(RuntimeError):
    pass


# baselines -------------------------------------------------------------------


@dataclass(frozen=True)
class Exponential:
    """Constant rate."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")

    def intensity(self, t):
        return np.full(np.shape(t), self.rate, dtype=float)

    def cumhaz(self, t):
        return self.rate * np.asarray(t, dtype=float)

    def inverse(self, s):
        return np.asarray(s, dtype=float) / self.rate

    breakpoints = ()


@dataclass(frozen=True)
class WeibullIntensity:
    """Power-law cumulative intensity ``scale * t**shape``."""

    scale: float
    shape: float

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError("scale and shape must be positive")

    def intensity(self, t):
        t = np.asarray(t, dtype=float)
        return self.scale * self.shape * t ** (self.shape - 1)

    def cumhaz(self, t):
        return self.scale * np.asarray(t, dtype=float) ** self.shape

    def inverse(self, s):
        return (np.asarray(s, dtype=float) / self.scale) ** (1 / self.shape)

    breakpoints = ()


@dataclass(frozen=True)
class PiecewiseExp:
    """Piecewise-constant intensity: ``rates[j]`` on ``[cuts[j], cuts[j+1])``."""

    cuts: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "cuts", tuple(float(c) for c in self.cuts))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.cuts) != len(self.rates) or self.cuts[0] != 0:
            raise ValueError("cuts must start at 0 and match rates in length")
        if np.any(np.diff(self.cuts) <= 0) or min(self.rates) <= 0:
            raise ValueError("cuts must increase and rates must be positive")

    @property
    def breakpoints(self):
        return self.cuts[1:]

    def _cum_at_cuts(self):
        c, r = np.asarray(self.cuts), np.asarray(self.rates)
        return np.concatenate([[0.0], np.cumsum(np.diff(c) * r[:-1])])

    def intensity(self, t):
        idx = np.searchsorted(self.cuts, np.asarray(t, dtype=float), side="right") - 1
        return np.asarray(self.rates)[np.clip(idx, 0, None)]

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        c, r = np.asarray(self.cuts), np.asarray(self.rates)
        idx = np.clip(np.searchsorted(c, t, side="right") - 1, 0, None)
        return self._cum_at_cuts()[idx] + r[idx] * (t - c[idx])

    def inverse(self, s):
        s = np.asarray(s, dtype=float)
        c, r = np.asarray(self.cuts), np.asarray(self.rates)
        H = self._cum_at_cuts()
        idx = np.clip(np.searchsorted(H, s, side="right") - 1, 0, None)
        return c[idx] + (s - H[idx]) / r[idx]


@dataclass(frozen=True)
class Gompertz:
    """Hazard ``kappa * exp(nu * t)`` (constant when ``nu == 0``)."""

    kappa: float
    nu: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    def intensity(self, t):
        return self.kappa * np.exp(self.nu * np.asarray(t, dtype=float))

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        if self.nu == 0:
            return self.kappa * t
        return self.kappa / self.nu * np.expm1(self.nu * t)

    def inverse(self, s):
        s = np.asarray(s, dtype=float)
        if self.nu == 0:
            return s / self.kappa
        with np.errstate(invalid="ignore"):
            out = np.log1p(self.nu * s / self.kappa) / self.nu
        return np.where(self.nu * s / self.kappa <= -1, np.inf, out)

    breakpoints = ()


@dataclass(frozen=True)
class WeibullDensity:
    """Rate shaped like a Weibull density:
    ``(shape/scale) (t/scale)^(shape-1) exp{-(t/scale)^shape}``.

    Its cumulative intensity is bounded by one.
    """

    scale: float
    shape: float

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError("scale and shape must be positive")

    def intensity(self, t):
        x = np.asarray(t, dtype=float) / self.scale
        return self.shape / self.scale * x ** (self.shape - 1) * np.exp(-(x**self.shape))

    def cumhaz(self, t):
        return -np.expm1(-((np.asarray(t, dtype=float) / self.scale) ** self.shape))

    def inverse(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.scale * (-np.log1p(-s)) ** (1 / self.shape)
        return np.where(s >= 1, np.inf, out)

    breakpoints = ()


@dataclass(frozen=True)
class PiecewiseExpDensity:
    """Rate ``rates[j] * exp{-H(t)}`` with ``H`` the piecewise-linear cumulative
    rate, i.e. the density of a piecewise-exponential lifetime."""

    cuts: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "_pw", PiecewiseExp(self.cuts, self.rates))

    @property
    def breakpoints(self):
        return self._pw.breakpoints

    def intensity(self, t):
        return self._pw.intensity(t) * np.exp(-self._pw.cumhaz(t))

    def cumhaz(self, t):
        return -np.expm1(-self._pw.cumhaz(t))

    def inverse(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self._pw.inverse(-np.log1p(-np.minimum(s, 1 - 1e-300)))
        return np.where(s >= 1, np.inf, out)


BASELINE_TYPES = {
    "exponential": Exponential,
    "weibull": WeibullIntensity,
    "piecewise": PiecewiseExp,
    "gompertz": Gompertz,
    "weibull_density": WeibullDensity,
    "piecewise_density": PiecewiseExpDensity,
}
_TYPE_OF = {v: k for k, v in BASELINE_TYPES.items()}


def baseline_to_dict(b) -> dict:
    d = {"type": _TYPE_OF[type(b)]}
    d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(b).items()})
    return d


def baseline_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind not in BASELINE_TYPES:
        raise ValueError(f"unknown baseline type {kind!r}; use one of {sorted(BASELINE_TYPES)}")
    return BASELINE_TYPES[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# scenarios -------------------------------------------------------------------


@dataclass(frozen=True)
class CensoringLaw:
    """Exponential censoring with rate ``c0 * exp(theta'Z)`` (independent when ``theta`` is empty)."""

    c0: float
    theta: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(x) for x in self.theta))
        if not self.c0 > 0:
            raise ValueError("censoring rate must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    """Joint-frailty data-generating specification.

    Covariate laws are tuples ``("bernoulli", p)``, ``("normal", mean, sd)``
    or ``("const", value)``; every generated covariate enters the fitted
    model.  Frailties are gamma with equal shape and rate (mean one);
    ``None`` switches a frailty off.  With ``n_clusters`` set, cluster sizes
    are uniform on ``cluster_size`` (inclusive) and ``n`` is ignored.
    """

    label: str
    recurrent: tuple = ()
    death: object = Gompertz(0.45, 0.30)
    alpha_recur: tuple[tuple[float, ...], ...] = ()
    alpha_death: tuple[float, ...] = ()
    weights: WeightScheme = WeightScheme((), 1.0)
    n: int = 2000
    covariates: tuple[tuple, ...] = (("bernoulli", 0.5), ("normal", 0.0, 1.0))
    frailty_shape: float | None = 4.5
    cluster_frailty_shape: float | None = None
    frailty_power: float = 1.0
    censoring: CensoringLaw | None = None
    n_clusters: int | None = None
    cluster_size: tuple[int, int] = (20, 80)

    def __post_init__(self):
        object.__setattr__(self, "recurrent", tuple(self.recurrent))
        object.__setattr__(self, "alpha_recur", tuple(tuple(float(x) for x in a) for a in self.alpha_recur))
        object.__setattr__(self, "alpha_death", tuple(float(x) for x in self.alpha_death))
        object.__setattr__(self, "covariates", tuple(tuple(c) for c in self.covariates))
        p = len(self.covariates)
        if len(self.alpha_recur) != len(self.recurrent):
            raise ValueError("one coefficient vector per recurrent type is required")
        if any(len(a) != p for a in self.alpha_recur) or len(self.alpha_death) != p:
            raise ValueError("coefficient vectors must match the number of covariates")
        if self.weights.K != len(self.recurrent):
            raise ValueError("weight scheme does not match the number of recurrent types")
        for s in (self.frailty_shape, self.cluster_frailty_shape):
            if s is not None and not s > 0:
                raise ValueError("frailty shapes must be positive")
        if self.censoring is not None and self.censoring.theta and len(self.censoring.theta) != p:
            raise ValueError("censoring theta must match the number of covariates")
        if self.n_clusters is None and self.n < 1:
            raise ValueError("n must be positive")
        for law in self.covariates:
            if law[0] not in ("bernoulli", "normal", "const"):
                raise ValueError(f"unknown covariate law {law[0]!r}")

    @property
    def K(self) -> int:
        return len(self.recurrent)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple("(Intercept)" if law[0] == "const" else f"Z{j + 1}" for j, law in enumerate(self.covariates))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n": self.n,
            "n_clusters": self.n_clusters,
            "cluster_size": list(self.cluster_size),
            "covariates": [list(c) for c in self.covariates],
            "frailty_shape": self.frailty_shape,
            "cluster_frailty_shape": self.cluster_frailty_shape,
            "frailty_power": self.frailty_power,
            "recurrent": [baseline_to_dict(b) for b in self.recurrent],
            "death": baseline_to_dict(self.death),
            "alpha_recur": [list(a) for a in self.alpha_recur],
            "alpha_death": list(self.alpha_death),
            "weights": [*self.weights.w_recur, self.weights.w_term],
            "censoring": None
            if self.censoring is None
            else {"c0": self.censoring.c0, "theta": list(self.censoring.theta)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        w = list(d.get("weights", [1.0]))
        cens = d.get("censoring")
        return cls(
            label=d.get("label", "custom"),
            recurrent=tuple(baseline_from_dict(b) for b in d.get("recurrent", [])),
            death=baseline_from_dict(d["death"]),
            alpha_recur=tuple(tuple(a) for a in d.get("alpha_recur", [])),
            alpha_death=tuple(d["alpha_death"]),
            weights=WeightScheme(tuple(w[:-1]), w[-1]),
            n=d.get("n", 2000),
            covariates=tuple(tuple(c) for c in d.get("covariates", [["bernoulli", 0.5], ["normal", 0.0, 1.0]])),
            frailty_shape=d.get("frailty_shape", 4.5),
            cluster_frailty_shape=d.get("cluster_frailty_shape"),
            frailty_power=d.get("frailty_power", 1.0),
            censoring=None if cens is None else CensoringLaw(cens["c0"], tuple(cens.get("theta", ()))),
            n_clusters=d.get("n_clusters"),
            cluster_size=tuple(d.get("cluster_size", (20, 80))),
        )


TYPE1 = WeibullIntensity(0.5, 1.25)
TYPE2 = PiecewiseExp((0.0, 1.0, 3.0), (0.40, 0.22, 0.10))
SET_I = dict(
    recurrent=(TYPE1, TYPE2),
    death=Gompertz(0.45, 0.30),
    alpha_recur=((0.5, -0.8), (0.3, 0.9)),
    alpha_death=(0.2, 1.0),
)
SET_II = dict(
    recurrent=(TYPE1, TYPE2),
    death=Gompertz(0.10, 0.30),
    alpha_recur=((0.2, 0.5), (0.8, 1.0)),
    alpha_death=(0.2, 1.0),
)
EQUAL = WeightScheme((1.0, 1.0), 1.0)
UNEQUAL = WeightScheme((1.0, 2.0), 2.0)


def _scenarios() -> dict[str, ScenarioConfig]:
    c25 = CensoringLaw(0.20, (0.2, 0.5))
    c50 = CensoringLaw(0.45, (0.5, 0.5))
    c_ind = CensoringLaw(0.55)
    out = {
        "I(a)": ScenarioConfig("I(a)", weights=EQUAL, censoring=c25, **SET_I),
        "I(b)": ScenarioConfig("I(b)", weights=EQUAL, censoring=c50, **SET_I),
        "I(c)": ScenarioConfig("I(c)", weights=UNEQUAL, censoring=c25, **SET_I),
        "I(d)": ScenarioConfig("I(d)", weights=UNEQUAL, censoring=c50, **SET_I),
        "II(a)": ScenarioConfig("II(a)", weights=EQUAL, censoring=CensoringLaw(0.17, (0.5, 0.5)), **SET_II),
        "II(b)": ScenarioConfig("II(b)", weights=UNEQUAL, censoring=CensoringLaw(0.17, (0.5, 0.5)), **SET_II),
        "IC(a)": ScenarioConfig("IC(a)", weights=EQUAL, censoring=c_ind, **SET_I),
        "IC(b)": ScenarioConfig("IC(b)", weights=UNEQUAL, censoring=c_ind, **SET_I),
        "CRT": ScenarioConfig(
            "CRT",
            weights=EQUAL,
            censoring=CensoringLaw(0.27, (0.5, 0.2)),
            n_clusters=60,
            cluster_size=(20, 80),
            cluster_frailty_shape=2.0,
            **{**SET_I, "death": Gompertz(0.30, 0.30)},
        ),
    }
    return out


SCENARIOS = _scenarios()


def get_scenario(label: str, **overrides) -> ScenarioConfig:
    """Registered scenario by label, optionally with fields replaced."""
    if label not in SCENARIOS:
        raise KeyError(f"unknown scenario {label!r}; valid labels: {', '.join(SCENARIOS)}")
    return replace(SCENARIOS[label], **overrides) if overrides else SCENARIOS[label]


def density_cluster_scenario() -> ScenarioConfig:
    """Clustered scenario with density-shaped recurrent baselines.

    Type 1 uses :class:`WeibullDensity` and type 2 :class:`PiecewiseExpDensity`
    with the same parameters as the registered ``CRT`` scenario.  These rates
    decay over time, so the event process differs markedly from ``CRT``.
    """
    return replace(
        SCENARIOS["CRT"],
        label="CRT-density",
        recurrent=(WeibullDensity(0.5, 1.25), PiecewiseExpDensity((0.0, 1.0, 3.0), (0.40, 0.22, 0.10))),
    )


# generation --------------------------------------------------------------------


def substream(seed: int, kind: int, index: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, kind, index)``.

    ``kind`` separates uses (0: replicate data, 1: oracle population).
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(kind), int(index)]))


@dataclass
class SimulatedArrays:
    Z: np.ndarray
    D: np.ndarray
    C: np.ndarray
    event_subject: np.ndarray
    event_type: np.ndarray
    event_time: np.ndarray
    cluster: np.ndarray | None = None

    @property
    def U(self):
        return np.minimum(self.D, self.C)

    @property
    def delta(self):
        return (self.D <= self.C).astype(int)


def _draw_covariates(laws, n, rng) -> np.ndarray:
    cols = []
    for law in laws:
        kind, *par = law
        if kind == "bernoulli":
            cols.append(rng.binomial(1, par[0] if par else 0.5, n).astype(float))
        elif kind == "normal":
            mu, sd = (list(par) + [0.0, 1.0][len(par) :])[:2]
            cols.append(rng.normal(mu, sd, n))
        else:
            cols.append(np.full(n, float(par[0]) if par else 1.0))
    return np.column_stack(cols) if cols else np.empty((n, 0))


def _gamma_frailty(shape, n, rng) -> np.ndarray:
    return np.ones(n) if shape is None else rng.gamma(shape, 1.0 / shape, n)


def simulate_arrays(
    scenario: ScenarioConfig,
    rng: np.random.Generator,
    *,
    n: int | None = None,
    n_clusters: int | None = None,
    censor: bool = True,
) -> SimulatedArrays:
    """Draw latent and observed quantities as flat arrays.

    Recurrent events are returned up to the death time ``D`` (not truncated by
    censoring).  ``n`` or ``n_clusters`` override the scenario's sizes.
    """
    cluster = None
    if scenario.n_clusters is not None:
        M = n_clusters if n_clusters is not None else scenario.n_clusters
        lo, hi = scenario.cluster_size
        sizes = rng.integers(lo, hi + 1, size=M)
        cluster = np.repeat(np.arange(M), sizes)
        B = _gamma_frailty(scenario.cluster_frailty_shape, M, rng)[cluster]
        n_sub = cluster.size
    else:
        n_sub = n if n is not None else scenario.n
        B = _gamma_frailty(scenario.cluster_frailty_shape, n_sub, rng)
    Z = _draw_covariates(scenario.covariates, n_sub, rng)
    W = _gamma_frailty(scenario.frailty_shape, n_sub, rng)

    m_death = B * W**scenario.frailty_power * np.exp(Z @ np.asarray(scenario.alpha_death))
    D = np.asarray(scenario.death.inverse(rng.exponential(size=n_sub) / m_death), dtype=float)

    es, et, tt = [], [], []
    for k, (base, alpha) in enumerate(zip(scenario.recurrent, scenario.alpha_recur), start=1):
        cap = base.cumhaz(D)
        cnt = rng.poisson(B * W * np.exp(Z @ np.asarray(alpha)) * cap)
        idx = np.repeat(np.arange(n_sub), cnt)
        times = base.inverse(rng.uniform(size=idx.size) * cap[idx])
        es.append(idx)
        et.append(np.full(idx.size, k))
        tt.append(np.minimum(times, D[idx]))
    if censor and scenario.censoring is not None:
        law = scenario.censoring
        rate = law.c0 * (np.exp(Z @ np.asarray(law.theta)) if law.theta else 1.0)
        C = rng.exponential(size=n_sub) / rate
    else:
        C = np.full(n_sub, np.inf)
    cat = (lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dtype=dt))
    return SimulatedArrays(Z, D, C, cat(es, np.intp), cat(et, int), cat(tt, float), cluster)


def simulate_dataset(scenario: ScenarioConfig, seed: int, replicate: int = 0) -> EventDataset:
    """One observed dataset; identical for identical ``(seed, replicate)``."""
    arr = simulate_arrays(scenario, substream(seed, 0, replicate))
    if not np.all(np.isfinite(arr.U)):
        raise SimulationError("scenario produces infinite follow-up; add censoring or a proper death law")
    U = arr.U
    keep = arr.event_time <= U[arr.event_subject]
    return EventDataset.from_arrays(
        arr.Z,
        U,
        arr.delta,
        arr.event_subject[keep],
        arr.event_type[keep],
        arr.event_time[keep],
        clusters=None if arr.cluster is None else arr.cluster.tolist(),
        K=scenario.K,
        covariate_names=scenario.covariate_names,
    )


# closed-form rates -------------------------------------------------------------


@dataclass(frozen=True)
class DgmParams:
    """Parameters of the single-binary-covariate models with closed-form rates.

    ``kappa`` is the gamma frailty variance (DGM 2 and 4) and
    ``frailty_power`` the exponent of the frailty on the death hazard (DGM 4).
    """

    death: object = Exponential(0.3)
    beta_D: float = 0.0
    w_D: float = 1.0
    recurrent: tuple = ()
    beta_recur: tuple[float, ...] = ()
    w_recur: tuple[float, ...] = ()
    kappa: float = 0.0
    frailty_power: float = 1.0

    def __post_init__(self):
        if not (len(self.recurrent) == len(self.beta_recur) == len(self.w_recur)):
            raise ValueError("recurrent baselines, effects and weights must align")


def _quad(f, a, b, points=()) -> float:
    pts = [p for p in points if a < p < b]
    val, _ = integrate.quad(f, a, b, points=pts or None, epsabs=0.0, epsrel=1e-10, limit=200)
    return val


def _breaks(p: DgmParams):
    pts = set(getattr(p.death, "breakpoints", ()))
    for b in p.recurrent:
        pts.update(getattr(b, "breakpoints", ()))
    return sorted(pts)


def _rate_frailty_gamma(p: DgmParams, t: float, a: float) -> float:
    """Gamma-frailty (power one) rate by one-dimensional quadrature."""
    k = p.kappa
    eD = math.exp(p.beta_D * a)
    S = lambda u: (1 + k * eD * float(p.death.cumhaz(u))) ** (-1 / k)
    num = p.w_D * (1 - S(t))
    for base, b, w in zip(p.recurrent, p.beta_recur, p.w_recur):
        if w:
            num += w * math.exp(b * a) * _quad(lambda u: S(u) ** (1 + k) * float(base.intensity(u)), 0, t, _breaks(p))
    return num / _quad(S, 0, t, _breaks(p))


def _rate_no_frailty(p: DgmParams, t: float, a: float) -> float:
    eD = math.exp(p.beta_D * a)
    S = lambda u: math.exp(-eD * float(p.death.cumhaz(u)))
    num = p.w_D * (1 - S(t))
    for base, b, w in zip(p.recurrent, p.beta_recur, p.w_recur):
        if w:
            num += w * math.exp(b * a) * _quad(lambda u: S(u) * float(base.intensity(u)), 0, t, _breaks(p))
    return num / _quad(S, 0, t, _breaks(p))


def _rate_power_frailty(p: DgmParams, t: float, a: float, n_nodes: int = 80) -> float:
    """Joint frailty with ``W^gamma`` on death; expectation over gamma ``W`` by
    generalised Gauss-Laguerre nodes, time integrals by adaptive quadrature."""
    alpha = 1.0 / p.kappa
    x, wts = special.roots_genlaguerre(n_nodes, alpha - 1)
    W = x / alpha
    wts = wts / math.gamma(alpha)
    Wg = W**p.frailty_power
    eD = math.exp(p.beta_D * a)

    def surv(u):
        return np.exp(-Wg * eD * float(p.death.cumhaz(u)))

    def num_integrand(u):
        s = surv(u)
        val = p.w_D * float(p.death.intensity(u)) * eD * Wg
        for base, b, w in zip(p.recurrent, p.beta_recur, p.w_recur):
            val = val + w * float(base.intensity(u)) * math.exp(b * a) * W
        return float(np.dot(wts, val * s))

    den = _quad(lambda u: float(np.dot(wts, surv(u))), 0, t, _breaks(p))
    return _quad(num_integrand, 0, t, _breaks(p)) / den


def closed_form_rate(dgm_id: int, params: DgmParams | dict, t: float, a: float, method: str = "auto") -> float:
    """Population while-alive loss rate at ``t`` for arm ``a``.

    Parameters
    ----------
    dgm_id : {1, 2, 3, 4}
        1: exponential death only; 2: gamma frailty acting on all events;
        3: no frailty, event-specific effects; 4: gamma frailty entering the
        death hazard as ``W**frailty_power``.
    params : DgmParams or dict
    method : {"auto", "quad"}
        ``"quad"`` forces numerical integration where a closed form exists.
    """
    p = params if isinstance(params, DgmParams) else DgmParams(**params)
    if not t > 0:
        raise ValueError("t must be positive")
    if dgm_id == 1:
        if not isinstance(p.death, Exponential) or any(p.w_recur):
            raise ValueError("DGM 1 needs a constant death hazard and no recurrent events")
        return p.death.rate * math.exp(p.beta_D * a)
    if dgm_id in (2, 4) and not p.kappa > 0:
        raise ValueError("frailty variance kappa must be positive")
    if dgm_id == 2:
        if method == "auto" and isinstance(p.death, Exponential) and not any(p.w_recur) and p.w_D == 1:
            al = p.kappa * p.death.rate * math.exp(p.beta_D * a)
            x = math.log1p(al * t)
            if p.kappa == 1:
                return al * (-math.expm1(-x)) / x
            e = 1 - 1 / p.kappa
            return al * e * (-math.expm1(-x / p.kappa)) / math.expm1(e * x)
        return _rate_frailty_gamma(p, t, a)
    if dgm_id == 3:
        return _rate_no_frailty(p, t, a)
    if dgm_id == 4:
        if method == "auto" and p.frailty_power == 1:
            return _rate_frailty_gamma(p, t, a)
        return _rate_power_frailty(p, t, a)
    raise ValueError(f"unknown DGM {dgm_id}")


# oracle and replication ------------------------------------------------------------


def _pointwise_root(X, L, E, link: LinkFunction, tol=1e-10, max_iter=100) -> np.ndarray:
    beta = np.zeros(X.shape[1])
    if link.name == "log":
        ones = np.flatnonzero(np.all(X == 1.0, axis=0))
        if ones.size and L.sum() > 0:
            beta[ones[0]] = math.log(L.sum() / E.sum())
    for _ in range(max_iter):
        lp = X @ beta
        score = X.T @ (L - E * link.inverse(lp))
        H = (X.T * (E * link.inverse_deriv(lp))) @ X
        step = np.linalg.solve(H, score)
        beta = beta + step
        if np.abs(step).max() < tol:
            return beta
    raise SimulationError("oracle Newton iterations did not converge")


def true_beta_oracle(
    scenario: ScenarioConfig,
    t_grid: Sequence[float],
    superpop_n: int = 10**6,
    seed: int = 0,
    link: str | LinkFunction = "log",
    weights: WeightScheme | None = None,
    chunk: int | None = None,
) -> np.ndarray:
    """Population coefficients ``beta(t)`` from a censoring-free super-population.

    At each ``t`` solves ``sum_i Z_i {L_i(t) - min(D_i, t) eta^{-1}(beta'Z_i)} = 0``.
    For clustered scenarios ``superpop_n`` counts subjects; the number of
    clusters is chosen to match it on average.

    Returns
    -------
    ndarray of shape ``(len(t_grid), p)``
    """
    link = get_link(link)
    weights = weights or scenario.weights
    rng = substream(seed, 1, 0)
    kw = {"censor": False}
    if scenario.n_clusters is not None:
        mean_size = 0.5 * sum(scenario.cluster_size)
        kw["n_clusters"] = max(1, int(round(superpop_n / mean_size)))
    else:
        kw["n"] = int(superpop_n)
    arr = simulate_arrays(scenario, rng, **kw)
    t_grid = np.asarray(t_grid, dtype=float)
    wr = np.asarray(weights.w_recur, dtype=float)
    out = np.empty((t_grid.size, arr.Z.shape[1]))
    n = arr.D.size
    for v, t in enumerate(t_grid):
        L = weights.w_term * (arr.D <= t)
        hit = arr.event_time <= t
        if wr.size:
            L = L + np.bincount(arr.event_subject[hit], weights=wr[arr.event_type[hit] - 1], minlength=n)
        E = np.minimum(arr.D, t)
        out[v] = _pointwise_root(arr.Z, L, E, link)
    return out


@dataclass
class MetricsTable:
    """Replication metrics per evaluation time and coefficient."""

    times: np.ndarray
    names: tuple[str, ...]
    truth: np.ndarray  # (T, p)
    estimates: np.ndarray  # (reps, T, p)
    ses: np.ndarray  # (reps, T, p)
    failures: int
    replicates: int
    failure_reasons: list[str] = field(default_factory=list)
    level: float = 0.95

    @property
    def mean(self):
        return self.estimates.mean(axis=0)

    @property
    def abias(self):
        return np.abs(self.mean - self.truth)

    @property
    def mcsd(self):
        return self.estimates.std(axis=0, ddof=1)

    @property
    def aese(self):
        return self.ses.mean(axis=0)

    @property
    def cp(self):
        from scipy.stats import norm

        z = norm.ppf(0.5 + self.level / 2)
        cover = np.abs(self.estimates - self.truth[None]) <= z * self.ses
        return cover.mean(axis=0)

    def rows(self) -> list[dict]:
        out = []
        for v, t in enumerate(self.times):
            for j, nm in enumerate(self.names):
                out.append(
                    {
                        "time": float(t),
                        "coef": nm,
                        "true": float(self.truth[v, j]),
                        "mean": float(self.mean[v, j]),
                        "abias": float(self.abias[v, j]),
                        "mcsd": float(self.mcsd[v, j]),
                        "aese": float(self.aese[v, j]),
                        "cp": float(self.cp[v, j]),
                    }
                )
        return out


def default_fit_spec(
    weights: WeightScheme,
    censoring: str = "cox",
    knots: Sequence[float] = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0),
    tau_grid: Sequence[float] | None = None,
) -> FitSpec:
    """Step basis with thresholds at ``knots``, stacked at the knots, log link."""
    basis = BasisConfig("step", tuple(knots))
    return FitSpec(
        basis=basis,
        tau_grid=tuple(tau_grid) if tau_grid is not None else tuple(knots),
        weights=weights,
        link=LinkFunction("log"),
        censoring=CensoringSpec(censoring),
    )


def _one_replicate(scenario, fit_spec, seed, r, times):
    try:
        data = simulate_dataset(scenario, seed, r)
        fit = solve(data, fit_spec)
        est = np.empty((times.size, data.p))
        se = np.empty_like(est)
        for j in range(data.p):
            c = effect_curve(fit, j, times)
            est[:, j], se[:, j] = c.estimate, c.se
        return est, se, None
    except (EstimationError, CensoringError, np.linalg.LinAlgError) as exc:
        return None, None, f"replicate {r}: {type(exc).__name__}: {exc}"


def run_scenario(
    scenario: ScenarioConfig,
    fit_spec: FitSpec,
    replicates: int,
    seed: int,
    *,
    truth: np.ndarray | None = None,
    eval_times: Sequence[float] | None = None,
    superpop_n: int = 10**6,
    n_jobs: int = 1,
    max_failure_rate: float = 0.05,
) -> MetricsTable:
    """Simulate, fit and summarise ``replicates`` datasets.

    Replicate ``r`` uses the generator keyed by ``(seed, r)``, so results do
    not depend on ``n_jobs``.  Failed fits are excluded and counted; more
    than ``max_failure_rate`` failures raise :class:`SimulationError`.
    """
    times = np.asarray(eval_times if eval_times is not None else fit_spec.tau_grid, dtype=float)
    if truth is None:
        truth = true_beta_oracle(scenario, times, superpop_n, seed, fit_spec.link, fit_spec.weights)
    truth = np.asarray(truth, dtype=float)
    if n_jobs == 1:
        res = [_one_replicate(scenario, fit_spec, seed, r, times) for r in range(replicates)]
    else:
        from joblib import Parallel, delayed

        res = Parallel(n_jobs=n_jobs)(
            delayed(_one_replicate)(scenario, fit_spec, seed, r, times) for r in range(replicates)
        )
    reasons = [x[2] for x in res if x[2] is not None]
    ok = [x for x in res if x[2] is None]
    if len(reasons) > max_failure_rate * replicates:
        raise SimulationError(
            f"{len(reasons)} of {replicates} replicates failed; first: " + "; ".join(reasons[:3])
        )
    if not ok:
        raise SimulationError("no successful replicates")
    return MetricsTable(
        times=times,
        names=scenario.covariate_names,
        truth=truth,
        estimates=np.stack([x[0] for x in ok]),
        ses=np.stack([x[1] for x in ok]),
        failures=len(reasons),
        replicates=replicates,
        failure_reasons=reasons,
    )
