import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinetic_parametrix import gaussian_kernel as gk
from kinetic_parametrix import parametrix as pm
from kinetic_parametrix.drift_fields import make_field

CFG = pm.ParametrixConfig(N=3, time_order=12, space_order=16, leaf_budget=100_000)
S, T = 0.0, 0.5
Z = np.array([0.2, -0.1])
Y = np.array([0.3, 0.4])


def taylor_coefficients(s, z, t, y, degree=4):
    # exact constant-drift density as a polynomial in c, fitted on a small interval
    cs = np.linspace(-0.3, 0.3, 13)
    vals = [float(pm.constant_drift_density(c, 1.0, s, z, t, y)) for c in cs]
    fit = np.polynomial.chebyshev.Chebyshev.fit(cs, vals, 10).convert(kind=np.polynomial.Polynomial)
    return fit.coef[:degree]


def test_config_validation():
    with pytest.raises(ValueError):
        pm.ParametrixConfig(eps=0.5)
    with pytest.raises(ValueError):
        pm.ParametrixConfig(eta=1.5)
    with pytest.raises(ValueError):
        pm.ParametrixConfig(N=-1)
    with pytest.raises(ValueError):
        pm.ParametrixConfig(mode="sparse")


def test_eps_sum_below_one():
    assert CFG.eps_sum == pytest.approx(0.2 * 2.6123753486854883, rel=1e-12)


@given(x=st.floats(-2, 2), v=st.floats(-2, 2), gap=st.floats(0.05, 1.0))
@settings(max_examples=25)
def test_zero_drift_collapses_to_gaussian(x, v, gap):
    y = np.array([x, v])
    pv = pm.eval_p(make_field("zero"), CFG, 0.0, Z, gap, y, with_tail=False)
    assert pv.value == pytest.approx(float(gk.eval_P(1.0, 0.0, Z, gap, y)), abs=1e-12)


def test_terms_match_taylor_coefficients():
    # depth 3 needs more than three time nodes per level to reach 1e-6
    cfg = pm.ParametrixConfig(N=3, time_order=12, space_order=16, leaf_budget=1_600_000)
    terms = pm.eval_p(make_field("constant", c=1.0), cfg, S, Z, T, Y, with_tail=False).terms
    assert np.allclose(terms, taylor_coefficients(S, Z, T, Y), rtol=1e-6, atol=1e-9)


def test_phi1_closed_form():
    f = make_field("constant", c=0.7)
    val = pm.phi1(f, 1.0, S, Z, T, Y)
    assert val == pytest.approx(0.7 * float(gk.grad_v_P(1.0, S, Z, T, Y)[0]), rel=1e-14)


def gaussian_second_derivative(s, z, t, y, a, b):
    # a^T Hess_y P b for the driftless kernel, d = 1
    cov = gk.covariance(1.0, t - s)
    prec = np.array([[cov.inv_xx, cov.inv_xv], [cov.inv_xv, cov.inv_vv]])
    w = y - gk.shift(t - s, z)
    grad = prec @ w
    p = float(gk.eval_P(1.0, s, z, t, y))
    return p * (np.dot(a, grad) * np.dot(b, grad) - a @ prec @ b)


def test_phi2_closed_form():
    # constant c: phi_2 = c^2 (h dx + dv)(h^2/2 dx + h dv) P in the y variables
    h = T - S
    exact = 0.7**2 * gaussian_second_derivative(S, Z, T, Y, np.array([h, 1.0]), np.array([h * h / 2, h]))
    assert pm.phi_n(make_field("constant", c=0.7), CFG, 2, S, Z, T, Y) == pytest.approx(exact, rel=1e-8)


def test_second_term_against_taylor_coefficient():
    f = make_field("constant", c=1.0)
    terms = pm.series_ratios(f, CFG, S, Z, T, Y, N=2) * float(gk.eval_P(1.0, S, Z, T, Y))
    assert terms[2] == pytest.approx(taylor_coefficients(S, Z, T, Y)[2], rel=1e-6)


def test_constant_oracle_improves_with_depth():
    f = make_field("constant", c=0.5)
    exact = float(pm.constant_drift_density(0.5, 1.0, S, Z, T, Y))
    errs = []
    for N in range(5):
        cfg = pm.ParametrixConfig(N=N, time_order=12, space_order=16, leaf_budget=100_000)
        errs.append(abs(pm.eval_p(f, cfg, S, Z, T, Y, with_tail=False).value / exact - 1))
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3


def test_mass_close_to_one():
    for kind in ("constant", "holder"):
        mass = pm.normalization(make_field(kind), CFG, 0.0, np.array([0.2, 0.1]), 0.5, order=6)
        assert abs(mass - 1) < 1e-2


def test_integrate_matches_exact_for_constant_drift():
    f = make_field("constant", c=0.5)
    g = lambda y: np.exp(-np.sum(y**2, axis=-1))
    got = pm.integrate_p(f, CFG, S, Z, T, g).sum()
    # exact: Gaussian integral of g against the shifted driftless law
    cfg0 = pm.ParametrixConfig(N=0, space_order=40)
    h = T - S
    off = np.array([0.5 * h**2 / 2, 0.5 * h])
    ref = pm.integrate_p(make_field("zero"), cfg0, S, Z, T, lambda y: g(y + off)).sum()
    assert got == pytest.approx(ref, abs=3e-4)


def test_monte_carlo_twin_agrees():
    f = make_field("holder")
    cfg = pm.ParametrixConfig(N=2, time_order=12, space_order=16, leaf_budget=100_000, mc_paths=40_000, seed=3)
    quad = pm.eval_p(f, cfg, S, Z, T, Y, with_tail=False).value
    est, se = pm.mc_eval_p(f, cfg, S, Z, T, Y)
    assert abs(est - quad) < 4 * se + 1e-4


def test_monte_carlo_integral_agrees():
    f = make_field("holder")
    g = lambda y: np.cos(y[..., 0]) * np.exp(-y[..., 1] ** 2)
    cfg = pm.ParametrixConfig(N=2, time_order=12, space_order=16, leaf_budget=100_000, mc_paths=100_000, seed=5)
    quad = pm.integrate_p(f, cfg, S, Z, T, g).sum()
    est, se = pm.mc_integrate_p(f, cfg, S, Z, T, g)
    assert abs(est - quad) < 4 * se + 1e-4


def test_requires_ordered_times():
    with pytest.raises(ValueError):
        pm.eval_p(make_field("holder"), CFG, 0.5, Z, 0.5, Y)


def test_sandwich_positive_on_grid():
    grid = [(0.0, np.zeros(2), 0.5, np.array([x, v])) for x in (-0.5, 0.5) for v in (-1.0, 1.0)]
    res = pm.gaussian_sandwich_check(make_field("holder"), CFG, grid)
    assert res.passed and res.min_p > 0


def test_fitted_weight_constant_stable():
    a = pm.fit_C_beta(0.5, n=20_000, seed=0)
    b = pm.fit_C_beta(0.5, n=20_000, seed=1)
    assert 0 < a < np.inf and abs(a - b) / max(a, b) < 0.25


def test_integrated_terms_match_taylor_coefficients():
    # each integrated term is the matching power of c in E g(Y) for the shifted Gaussian law
    g = lambda y: np.exp(-np.sum(y**2, axis=-1))
    cfg0 = pm.ParametrixConfig(N=0, space_order=40)
    h = T - S
    cs = np.linspace(-0.6, 0.6, 17)
    vals = [pm.integrate_p(make_field("zero"), cfg0, S, Z, T, lambda y, c=c: g(y + np.array([c * h * h / 2, c * h]))).sum()
            for c in cs]
    coef = np.polynomial.chebyshev.Chebyshev.fit(cs, vals, 14).convert(kind=np.polynomial.Polynomial).coef
    terms = pm.integrate_p(make_field("constant", c=0.5), CFG, S, Z, T, g)
    assert np.allclose(terms, coef[:4] * 0.5 ** np.arange(4), atol=5e-5)
