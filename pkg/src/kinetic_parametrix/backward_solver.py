"""Backward Kolmogorov problem L u = Psi on (0, T), u(T, .) = g, solved through the kernel p.

    u(t,z) = int p(t,z;T,y) g(y) dy - int_t^T int p(t,z;tau,y) Psi(tau,y) dy dtau
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

from . import gaussian_kernel as gk
from . import parametrix as pm
from .drift_fields import DriftField, evaluate
from .lie_group import lie_derivative_fd
from .test_functions import TestFunction, gaussian_expectation


@dataclass(frozen=True)
class BackwardProblem:
    """Terminal data g and source Psi(t, z).

    gamma is the allowed blow-up (T - t)^(-gamma) of Psi near T; the time
    quadrature absorbs it with Gauss-Jacobi nodes.
    """
    T: float = 1.0
    g: Optional[Callable[[np.ndarray], np.ndarray]] = None
    Psi: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    gamma: float = 0.0
    beta_psi: float = 0.5
    beta_g: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")

    def check_against(self, field_: DriftField):
        if not self.beta_psi < field_.alpha:
            raise ValueError("source Hoelder exponent must be below the drift's alpha")


def source_problem(psi: Callable[[np.ndarray], np.ndarray], T: float = 1.0) -> BackwardProblem:
    """The special case g = 0, Psi(t, z) = psi(z)."""
    return BackwardProblem(T=T, Psi=lambda t, z: psi(z))


def _time_nodes(t: float, T: float, order: int, gamma: float):
    """Nodes on (t, T) with weights for the raw integrand; Gauss-Jacobi absorbs (T - tau)^-gamma."""
    if gamma > 0:
        x, w = special.roots_jacobi(order, -gamma, 0.0)
        tau = t + (T - t) * (x + 1) / 2
        return tau, ((T - t) / 2) ** (1 - gamma) * w * (T - tau) ** gamma
    x, w = np.polynomial.legendre.leggauss(order)
    return t + (T - t) * (x + 1) / 2, w * (T - t) / 2


def solve_u(problem: BackwardProblem, field_: DriftField, config: pm.ParametrixConfig, t: float, z,
            time_order: int = 8) -> np.ndarray:
    """u(t, z) through quadrature against the parametrix; z may be a batch (n, 2d)."""
    T = problem.T
    if not 0 <= t < T:
        raise ValueError("need 0 <= t < T")
    z = np.asarray(z, dtype=float)
    out = np.zeros(z.shape[:-1])
    if problem.g is not None:
        out = out + pm.integrate_p(field_, config, t, z, T, problem.g).sum(axis=0)
    if problem.Psi is not None:
        tau, w = _time_nodes(t, T, time_order, problem.gamma)
        for tk, wk in zip(tau, w):
            inner = pm.integrate_p(field_, config, t, z, tk, lambda y: problem.Psi(tk, y)).sum(axis=0)
            out = out - wk * inner
    return out


def driftless_gaussian_u(psi_center, width: float, height: float, sigma: float, T: float, t, z,
                         time_order: int = 64, convention=gk.CovarianceConvention.GENERATOR) -> np.ndarray:
    """u(t,z) = -int_t^T E[psi(Y_tau)] dtau for F = 0 and a Gaussian bump psi, Gaussian part in closed form."""
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    x, w = np.polynomial.legendre.leggauss(time_order)
    total = np.zeros(np.broadcast_shapes(t.shape, z.shape[:-1]))
    for xk, wk in zip(x, w):
        tau = t + (T - t) * (xk + 1) / 2
        h = tau - t
        cov = gk.covariance(sigma, h, convention)
        mean = gk.shift(h, z)
        total = total - wk * (T - t) / 2 * gaussian_expectation(psi_center, width, height, mean,
                                                               (cov.xx, cov.xv, cov.vv))
    return total


@dataclass
class ResidualReport:
    max_residual: float
    normalized: float
    fd_step: float
    points: int


def strong_lie_residual(u: Callable[[np.ndarray], np.ndarray], field_: DriftField, sigma: float, grid,
                        Psi: Optional[Callable[[np.ndarray], np.ndarray]] = None, h: float = 1e-3,
                        psi_sup: float = 0.0) -> ResidualReport:
    """max |sigma Lap_v u + Y u + F . grad_v u - Psi| over grid points (t, x, v).

    `u` takes an array of space-time points (..., 1+2d). Y is applied along
    the transport flow only; t and x are never differentiated separately.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    d = (grid.shape[-1] - 1) // 2
    base = u(grid)
    yu = lie_derivative_fd(u, grid, h)
    lap = np.zeros_like(base)
    grad = np.zeros(base.shape + (d,))
    for i in range(d):
        e = np.zeros(grid.shape[-1])
        e[1 + d + i] = h
        up, dn = u(grid + e), u(grid - e)
        lap += (up - 2 * base + dn) / h**2
        grad[..., i] = (up - dn) / (2 * h)
    drift = evaluate(field_, grid[..., 0], grid[..., 1:])
    res = sigma * lap + yu + np.sum(drift * grad, axis=-1)
    if Psi is not None:
        res = res - Psi(grid)
    if not np.all(np.isfinite(res)):
        raise FloatingPointError("non-finite finite differences")
    m = float(np.max(np.abs(res)))
    return ResidualReport(m, m / (psi_sup + 1), h, grid.shape[0])


def C_beta_psi(psi_sup: float, grad_sup: float, beta: float) -> float:
    """max{2^(1-beta) |psi|_inf |grad psi|_inf^beta, |grad psi|_inf}."""
    return float(max(2 ** (1 - beta) * psi_sup * grad_sup**beta, grad_sup))


@dataclass
class GradientBoundReport:
    C_beta_psi: float
    sup_u: float
    sup_grad_v_u: float
    C_u: float
    sup_bound_holds: bool


def gradient_bound_check(u_values: np.ndarray, grad_v_values: np.ndarray, psi: TestFunction, T: float,
                         beta: float) -> GradientBoundReport:
    """Fit the smallest C_u with sup|u| + sup|grad_v u| <= C_u C_beta(psi) on the sampled values."""
    cb = C_beta_psi(psi.sup, psi.grad_sup, beta)
    su = float(np.max(np.abs(u_values))) if np.size(u_values) else 0.0
    sg = float(np.max(np.abs(grad_v_values))) if np.size(grad_v_values) else 0.0
    Cu = (su + sg) / cb if cb > 0 else 0.0
    return GradientBoundReport(cb, su, sg, Cu, su <= T * psi.sup * (1 + 1e-12))


@dataclass
class DualityReport:
    t: float
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    residual: float
    combined_se: float
    passed: bool


def duality_identity_check(u_at_t: Callable[[np.ndarray], np.ndarray], psi: Callable[[np.ndarray], np.ndarray],
                           flow, t: float, lhs_paths: Optional[int] = None) -> DualityReport:
    """|int u(t,.) d mu_t + int_t^T int psi d mu_s ds| against 3 combined standard errors.

    The left side averages u over the first `lhs_paths` samples of mu_t (u may
    be costly); the right side uses every path with a trapezoid in time.
    """
    times = flow.times
    i_t = int(np.argmin(np.abs(times - t)))
    if abs(times[i_t] - t) > 1e-12:
        raise ValueError("t must lie on the flow's time grid")
    n = flow.samples.shape[1]
    m = n if lhs_paths is None else min(lhs_paths, n)
    if i_t == len(times) - 1:
        lhs_vals = np.zeros(m)
    else:
        lhs_vals = u_at_t(flow.samples[i_t, :m])
    tail = times[i_t:]
    if len(tail) > 1:
        vals = np.stack([psi(flow.samples[k]) for k in range(i_t, len(times))])
        per_path = np.trapezoid(vals, tail, axis=0)
    else:
        per_path = np.zeros(n)
    lhs, rhs = float(lhs_vals.mean()), float(-per_path.mean())
    lse = float(lhs_vals.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    rse = float(per_path.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    comb = float(np.hypot(lse, rse))
    resid = abs(lhs - rhs)
    return DualityReport(float(times[i_t]), lhs, lse, rhs, rse, resid, comb, bool(resid <= 3 * comb + 1e-15))


def terminal_attainment(problem: BackwardProblem, field_: DriftField, config: pm.ParametrixConfig, z,
                        gaps=(0.5, 0.25, 0.125, 0.0625)) -> list:
    """sup over z of |u(T - gap, z) - g(z)| for shrinking gaps; the sequence should fall towards 0."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    g = problem.g if problem.g is not None else (lambda y: np.zeros(y.shape[:-1]))
    rows = []
    for gap in gaps:
        u = solve_u(problem, field_, config, problem.T - gap, z)
        rows.append((gap, float(np.max(np.abs(u - g(z))))))
    return rows
