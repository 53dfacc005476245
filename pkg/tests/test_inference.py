import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from helpers import scenario_data
from whilealive.basis import BasisConfig, beta_at
from whilealive.data import WeightScheme
from whilealive.estimator import CensoringSpec, FitSpec, solve
from whilealive.inference import (
    InferenceError,
    averaged_effect,
    effect_curve,
    global_wald,
    knot_table,
    pointwise_ci,
    predict_rate,
    rate_reduction,
    wald_test,
)
from whilealive.simulator import get_scenario, simulate_dataset

W = WeightScheme((1.0, 1.0), 1.0)


@pytest.fixture(scope="module")
def fit():
    d = scenario_data(n=300)
    return solve(d, FitSpec(BasisConfig("bz", (0.0, 1.0, 2.0, 3.0), 1), (0.5, 1.0, 1.5, 2.0, 2.5, 3.0), W))


def test_pointwise_ci_quantile_and_estimate(fit):
    est, lo, hi = pointwise_ci(fit, 0, 1.7)
    assert est == pytest.approx(beta_at(fit.gamma, fit.spec.basis, 1.7)[0], abs=1e-14)
    se = effect_curve(fit, 0, [1.7]).se[0]
    assert (hi - est) / se == pytest.approx(1.959964, abs=1e-6)
    est90, lo90, _ = pointwise_ci(fit, 0, 1.7, level=0.9)
    assert (est90 - lo90) / se == pytest.approx(stats.norm.ppf(0.95))


def test_zero_vcov_degenerate(fit):
    f0 = dataclasses.replace(fit, vcov=np.zeros_like(fit.vcov))
    est, lo, hi = pointwise_ci(f0, 1, 2.0)
    assert lo == est == hi
    with pytest.raises(InferenceError):
        pointwise_ci(dataclasses.replace(fit, vcov=None), 0, 1.0)


def test_ci_width_root_n():
    sc = get_scenario("I(b)", n=1600)
    big = simulate_dataset(sc, 5)
    small = big.subset(np.arange(400))
    spec = FitSpec(BasisConfig("st", (1.0, 2.0)), (1.0, 2.0), W, "log", CensoringSpec("cox"))
    se_big = effect_curve(solve(big, spec), 0, [1.0]).se[0]
    se_small = effect_curve(solve(small, spec), 0, [1.0]).se[0]
    assert 0.9 * 2 <= se_small / se_big <= 1.1 * 2


def test_predict_rate_links(fit):
    Z = np.array([[1.0, 0.3], [0.0, -1.0]])
    m, lo, hi = predict_rate(fit, Z, [1.0, 2.0])
    lp = np.array([Z[0] @ fit.beta(1.0), Z[1] @ fit.beta(2.0)])
    np.testing.assert_allclose(m, np.exp(lp))
    se_lp = []
    for z, t in zip(Z, (1.0, 2.0)):
        from whilealive.basis import selection_matrix

        a = z @ selection_matrix(fit.spec.basis, 2, t)
        se_lp.append(math.sqrt(a @ fit.vcov @ a))
    np.testing.assert_allclose(hi - m, 1.959963984540054 * m * np.array(se_lp), rtol=1e-10)
    r, l1, u1 = predict_rate(fit, Z[0], 1.0)
    assert l1 <= r <= u1

    d = scenario_data(n=300)
    fid = solve(d, dataclasses.replace(fit.spec, link="identity"))
    m2, lo2, hi2 = predict_rate(fid, Z, [1.0, 1.0])
    curve_lp = Z @ fid.beta(1.0)
    np.testing.assert_allclose(m2, curve_lp)
    np.testing.assert_allclose(hi2 - m2, m2 - lo2)


def test_averaged_effect_examples(fit):
    # constant effect
    tf = dataclasses.replace(fit, spec=dataclasses.replace(fit.spec, basis=BasisConfig("tf", (0, 3.0))),
                             gamma=np.array([0.4, -0.2]), vcov=np.eye(2) * 0.01)
    est, se = averaged_effect(tf, 0, 0.5, 2.5)
    assert est == pytest.approx(0.4, abs=1e-14) and se == pytest.approx(0.1)
    # beta(t) = t on [0, 2] with hat functions at 0, 1, 2
    il = BasisConfig("bz", (0.0, 1.0, 2.0), 1)
    lin = dataclasses.replace(fit, spec=dataclasses.replace(fit.spec, basis=il), gamma=np.array([1.0, 2.0, 0.0, 0.0]),
                              vcov=np.eye(4))
    np.testing.assert_allclose(lin.beta([0.0, 0.5, 2.0])[:, 0], [0.0, 0.5, 2.0])
    assert averaged_effect(lin, 0, 0.0, 2.0)[0] == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ValueError):
        averaged_effect(lin, 0, 1.0, 1.0)


def test_averaged_effect_geometric_mean(fit):
    w = lambda u: 1.0 + u
    est, _ = averaged_effect(fit, 0, 0.5, 2.5, weight_fn=w, n_grid=200)
    u = np.linspace(0.5, 2.5, 200)
    b = fit.beta(u)[:, 0]
    c = np.full(200, (2.0) / 199)
    c[[0, -1]] /= 2
    c = c * w(u)
    geo = np.exp((c * b).sum() / c.sum())
    assert math.exp(est) == pytest.approx(geo, rel=1e-12)
    est2, _ = averaged_effect(fit, 0, 0.5, 2.5, n_grid=400)
    assert est2 == pytest.approx(averaged_effect(fit, 0, 0.5, 2.5)[0], abs=1e-4)
    at_risk, se = averaged_effect(fit, 0, 0.5, 2.5, weight_fn="at-risk")
    assert np.isfinite(at_risk) and se > 0


def test_wald_examples(fit):
    w0 = wald_test(np.zeros(2), np.eye(2))
    assert w0.statistic == 0 and w0.p_value == 1
    w1 = wald_test(np.ones(2), np.eye(2))
    assert w1.statistic == pytest.approx(2.0) and w1.df == 2
    g = global_wald(fit, 0)
    assert g.df == fit.R and 0 <= g.p_value <= 1
    with pytest.raises(InferenceError):
        wald_test(np.ones(2), np.zeros((2, 2)))


def test_wald_null_rejection_rate():
    # Z1 is independent of everything else, so its coefficient is zero at every t
    sc = get_scenario("IC(a)", n=1000, covariates=(("const", 1.0), ("bernoulli", 0.5), ("normal", 0.0, 1.0)),
                      alpha_recur=((0.0, 0.0, -0.8), (0.0, 0.0, 0.9)), alpha_death=(0.0, 0.0, 1.0))
    spec = FitSpec(BasisConfig("st", (1.0, 2.0)), (1.0, 2.0), sc.weights, "log", CensoringSpec("km"))
    rej = [global_wald(solve(simulate_dataset(sc, 99, r), spec), 1).p_value < 0.05 for r in range(400)]
    assert 0.03 <= np.mean(rej) <= 0.08


def test_rate_reduction():
    assert rate_reduction(-0.257) == pytest.approx(0.227, abs=5e-4)


def test_knot_table(fit):
    rows = knot_table(fit)
    assert len(rows) == fit.p * len(fit.spec.tau_grid)
    assert all(r["lower"] <= r["estimate"] <= r["upper"] for r in rows)
