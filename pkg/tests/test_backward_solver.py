import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinetic_parametrix import backward_solver as bs
from kinetic_parametrix import gaussian_kernel as gk
from kinetic_parametrix import parametrix as pm
from kinetic_parametrix.drift_fields import make_field
from kinetic_parametrix.langevin_sim import EmpiricalFlow
from kinetic_parametrix.test_functions import gaussian_bump

CFG = pm.ParametrixConfig(N=2, time_order=12, space_order=16, leaf_budget=100_000)
CENTER, WIDTH = [0.3, -0.2], 0.8
PSI = gaussian_bump(CENTER, WIDTH)


def closed_u(p):
    return bs.driftless_gaussian_u(CENTER, WIDTH, 1.0, 1.0, 1.0, p[..., 0], p[..., 1:])


def test_problem_validation():
    with pytest.raises(ValueError):
        bs.BackwardProblem(T=0.0)
    with pytest.raises(ValueError):
        bs.BackwardProblem(gamma=1.0)
    with pytest.raises(ValueError):
        bs.BackwardProblem(beta_psi=1.0).check_against(make_field("holder"))


def test_empty_problem_gives_zero():
    u = bs.solve_u(bs.BackwardProblem(), make_field("holder"), CFG, 0.2, np.zeros((3, 2)))
    assert np.all(u == 0)


def test_zero_source_gives_zero():
    prob = bs.source_problem(lambda z: np.zeros(z.shape[:-1]))
    assert np.all(bs.solve_u(prob, make_field("constant"), CFG, 0.2, np.zeros((2, 2)), time_order=3) == 0)


def test_time_must_precede_horizon():
    with pytest.raises(ValueError):
        bs.solve_u(bs.source_problem(PSI), make_field("zero"), CFG, 1.0, np.zeros(2))


def test_driftless_matches_closed_form():
    z = np.array([[0.1, 0.2], [-0.5, 0.7]])
    u = bs.solve_u(bs.source_problem(PSI), make_field("zero"), CFG, 0.3, z)
    ref = bs.driftless_gaussian_u(CENTER, WIDTH, 1.0, 1.0, 1.0, 0.3, z, time_order=8)
    assert np.allclose(u, ref, atol=1e-12)


def test_driftless_closed_form_against_monte_carlo():
    rng = np.random.default_rng(4)
    n, T, t0 = 200_000, 1.0, 0.0
    z0 = np.array([0.1, -0.3])
    taus = np.linspace(t0, T, 41)[1:]
    per_time = [PSI(gk.sample(1.0, t0, z0, tau, n, seed=11, call_index=k)).mean() for k, tau in enumerate(taus)]
    mc = -np.trapezoid(np.r_[float(PSI(z0)), per_time], np.r_[t0, taus])
    ref = float(closed_u(np.r_[t0, z0]))
    assert abs(mc - ref) < 2e-3


def test_strong_residual_driftless():
    rng = np.random.default_rng(0)
    grid = np.column_stack([rng.uniform(0, 0.9, 50), rng.uniform(-2, 2, (50, 2))])
    r = bs.strong_lie_residual(closed_u, make_field("zero"), 1.0, grid, Psi=lambda p: PSI(p[..., 1:]),
                               psi_sup=PSI.sup)
    assert r.max_residual < 1e-3


def test_strong_residual_of_zero():
    grid = np.random.default_rng(1).uniform(0, 0.5, (20, 3))
    r = bs.strong_lie_residual(lambda p: np.zeros(p.shape[:-1]), make_field("holder"), 1.0, grid)
    assert r.max_residual == 0.0


def test_linearity_and_sup_bound():
    z = np.array([[0.0, 0.0], [0.4, -0.6]])
    f = make_field("holder")
    u1 = bs.solve_u(bs.source_problem(PSI), f, CFG, 0.5, z, time_order=3)
    u2 = bs.solve_u(bs.source_problem(PSI.scaled(2.5)), f, CFG, 0.5, z, time_order=3)
    assert np.max(np.abs(u2 - 2.5 * u1)) < 1e-10
    assert np.max(np.abs(u1)) <= 1.0 * PSI.sup


def test_weight_constant_example():
    assert bs.C_beta_psi(1.0, 2.0, 0.5) == pytest.approx(2.0, rel=1e-15)
    assert bs.C_beta_psi(0.0, 0.0, 0.5) == 0.0


@given(gamma=st.floats(0.05, 0.9), t=st.floats(0.0, 0.8))
@settings(max_examples=30)
def test_singular_time_nodes_exact_on_polynomials(gamma, t):
    T = 1.0
    tau, w = bs._time_nodes(t, T, 8, gamma)
    # int_t^T (T - tau)^(-gamma) tau^2 d tau with u = T - tau
    L = T - t
    exact = (T**2 * L ** (1 - gamma) / (1 - gamma) - 2 * T * L ** (2 - gamma) / (2 - gamma)
             + L ** (3 - gamma) / (3 - gamma))
    assert np.sum(w * tau**2 / (T - tau) ** gamma) == pytest.approx(exact, rel=1e-10)


def test_gradient_bound_report():
    rep = bs.gradient_bound_check(np.array([0.1, -0.3]), np.array([0.2]), PSI, 1.0, 0.5)
    assert rep.sup_bound_holds
    assert rep.C_u == pytest.approx(0.5 / rep.C_beta_psi)


def test_duality_at_horizon_is_trivial():
    times = np.array([0.0, 0.5, 1.0])
    samples = np.random.default_rng(2).normal(size=(3, 50, 2))
    flow = EmpiricalFlow(times, samples, np.full((3, 50), 1 / 50))
    rep = bs.duality_identity_check(closed_u, PSI, flow, 1.0)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.passed


def test_terminal_attainment_shrinks():
    g = gaussian_bump([0.0, 0.0], 1.0)
    prob = bs.BackwardProblem(T=1.0, g=g)
    rows = bs.terminal_attainment(prob, make_field("zero"), CFG, np.array([[0.2, 0.1], [-0.3, 0.5]]))
    errs = [e for _, e in rows]
    assert all(b < a for a, b in zip(errs, errs[1:]))
