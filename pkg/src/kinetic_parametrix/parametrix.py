"""Levi parametrix for sigma Lap_v + Y + F . grad_v.

The fundamental solution is assembled as

    p = P + sum_{k=1}^N  P (x) phi_1 (x) ... (x) phi_1        (k factors of phi_1)

where (x) is space-time convolution and phi_1 = F . grad_v P. Since
grad_v P = P * ell with ell linear in the end points, every chain of Gaussian
factors collapses to P(s,z;t,y) times an expectation over the kinetic Gaussian
bridge from (s,z) to (t,y). Terms are therefore evaluated as nested
quadratures in bridge coordinates: Gauss-Hermite in space, Gauss-Legendre in
time after a cosine map that removes the inverse square-root singularities at
both ends of every gap.
"""
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from . import gaussian_kernel as gk
from .drift_fields import DriftField, evaluate
from .gaussian_kernel import CovarianceConvention
from .lie_group import b_norm, dim_of_phase, shift


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ParametrixConfig:
    sigma: float = 1.0
    N: int = 3
    delta: float = 0.1
    eps: float = 0.2
    eta: float = 0.5
    beta: float = 0.5
    time_order: int = 16
    space_order: int = 24
    leaf_budget: int = 400_000
    mode: str = "tensor"
    outer_order: int = 8
    mc_paths: int = 20_000
    seed: int = 0
    T: float = 1.0
    C_beta: float = 1.0
    C_grad: Optional[float] = None
    convention: CovarianceConvention = CovarianceConvention.GENERATOR

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("series depth must be nonnegative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.eta < 1 / self.beta - 1:
            raise ValueError("eta must lie in (0, 1/beta - 1)")
        if self.mode not in ("tensor", "montecarlo"):
            raise ValueError("mode must be 'tensor' or 'montecarlo'")
        if self.time_order < 2 or self.space_order < 2 or self.outer_order < 2:
            raise ValueError("quadrature orders must be at least 2")
        if self.eps_sum >= 1:
            raise ValueError(f"sum of eps_n is {self.eps_sum:.4f}, must be < 1")

    @property
    def kappa(self) -> float:
        return gk._kappa(self.sigma, self.convention)

    def eps_n(self, n) -> np.ndarray:
        return self.eps * np.asarray(n, dtype=float) ** (self.eta - 1 / self.beta)

    @property
    def eps_sum(self) -> float:
        return float(self.eps * special.zeta(1 / self.beta - self.eta))

    def level_orders(self, depth: int, d: int = 1) -> list:
        """Per-level (time, space) orders keeping the quadrature tree under the leaf budget."""
        if depth == 0:
            return []
        per_level = self.leaf_budget ** (1.0 / depth)
        orders = []
        n_s = self.space_order
        n_t = self.time_order
        while n_t * n_s ** (2 * d) > per_level and (n_s > 2 or n_t > 4):
            # three space nodes per axis are kept until the time order is down to 4
            if n_s > 3 and n_s ** (2 * d) >= n_t:
                n_s -= 1
            elif n_t > 4:
                n_t -= 1
            else:
                n_s -= 1
        if n_s < 3:
            warnings.warn(f"leaf budget {self.leaf_budget} leaves {n_s} space nodes per axis at depth {depth}; "
                          "deeper terms will be inaccurate (raise leaf_budget or use mode='montecarlo')")
        return [(n_t, n_s)] * depth


def with_field_beta(config: ParametrixConfig, field_: DriftField) -> ParametrixConfig:
    eta = min(config.eta, 0.5 * (1 / field_.beta - 1))
    return replace(config, beta=field_.beta, eta=eta)


# ---------------------------------------------------------------- quadrature primitives

def _hermite_tensor(order: int, dims: int):
    g, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / np.sqrt(2 * np.pi)
    grids = np.meshgrid(*([g] * dims), indexing="ij")
    weights = np.meshgrid(*([w] * dims), indexing="ij")
    nodes = np.stack([a.ravel() for a in grids], axis=-1)
    return nodes, np.prod(np.stack([a.ravel() for a in weights], axis=-1), axis=-1)


def _legendre01(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1), 0.5 * w


def _cos_map(a, b, order):
    """Nodes/weights for int_a^b with both endpoints smoothed by a cosine change of variable."""
    th, w = _legendre01(order)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    tau = a + (b - a) * 0.5 * (1 - np.cos(np.pi * th))
    wt = (b - a) * 0.5 * np.pi * np.sin(np.pi * th) * w
    return tau, wt


def _cov2(kappa, h):
    h = np.asarray(h, dtype=float)
    c = np.empty(h.shape + (2, 2))
    c[..., 0, 0] = kappa * h**3 / 3
    c[..., 0, 1] = c[..., 1, 0] = kappa * h**2 / 2
    c[..., 1, 1] = kappa * h
    return c


def _inv2(c):
    det = c[..., 0, 0] * c[..., 1, 1] - c[..., 0, 1] * c[..., 1, 0]
    inv = np.empty_like(c)
    inv[..., 0, 0] = c[..., 1, 1] / det
    inv[..., 1, 1] = c[..., 0, 0] / det
    inv[..., 0, 1] = -c[..., 0, 1] / det
    inv[..., 1, 0] = -c[..., 1, 0] / det
    return inv


def _chol2(c):
    l11 = np.sqrt(c[..., 0, 0])
    l21 = c[..., 1, 0] / l11
    l22 = np.sqrt(np.maximum(c[..., 1, 1] - l21**2, 0.0))
    return l11, l21, l22


def ell(kappa, tau_a, eta_a, tau_b, eta_b) -> np.ndarray:
    """grad_v P(tau_a, eta_a; tau_b, eta_b) / P, the linear score of the left point."""
    d = dim_of_phase(eta_a)
    # gaps below 1e-14 only arise from round-off in sampled times
    h = np.maximum(np.asarray(tau_b - tau_a, dtype=float), 1e-14)
    w = eta_b - shift(h, eta_a)
    hh = h[..., None]
    ixx = 12 / (kappa * hh**3)
    ixv = -6 / (kappa * hh**2)
    ivv = 4 / (kappa * hh)
    gx = ixx * w[..., :d] + ixv * w[..., d:]
    gv = ixv * w[..., :d] + ivv * w[..., d:]
    return hh * gx + gv


def _drift_dot(field_, tau, eta, score):
    return np.sum(evaluate(field_, tau, eta) * score, axis=-1)


def _apply2(l11, l21, l22, g, d):
    """Map standard normal nodes (..., 2d) through per-coordinate 2x2 Cholesky factors."""
    l11, l21, l22 = (np.asarray(a)[..., None] for a in (l11, l21, l22))
    gx, gv = g[..., :d], g[..., d:]
    return np.concatenate([l11 * gx, l21 * gx + l22 * gv], axis=-1)


def _score(kappa, h, w):
    """h * (C(h)^-1 w)_x + (C(h)^-1 w)_v for residual w, per coordinate."""
    d = w.shape[-1] // 2
    hh = np.asarray(h, dtype=float)[..., None]
    wx, wv = w[..., :d], w[..., d:]
    gx = 12 / (kappa * hh**3) * wx - 6 / (kappa * hh**2) * wv
    gv = -6 / (kappa * hh**2) * wx + 4 / (kappa * hh) * wv
    return hh * gx + gv


def _mat_apply(m, w):
    """Apply per-coordinate 2x2 matrices m (..., 2, 2) to phase vectors w (..., 2d)."""
    d = w.shape[-1] // 2
    wx, wv = w[..., :d], w[..., d:]
    return np.concatenate([m[..., 0, 0:1] * wx + m[..., 0, 1:2] * wv,
                           m[..., 1, 0:1] * wx + m[..., 1, 1:2] * wv], axis=-1)


def _forward_step(kappa, tau_a, eta_a, tau, noise):
    """eta ~ P(tau_a, eta_a; tau, .) from standard normal noise, plus the score of the left point."""
    h = np.maximum(tau - tau_a, 1e-14)
    d = noise.shape[-1] // 2
    l11, l21, l22 = _chol2(_cov2(kappa, h))
    w = _apply2(l11, l21, l22, noise, d)
    eta = shift(h, eta_a) + w
    return eta, _score(kappa, h, w)


def _bridge_step(kappa, s, z, tau, tau_b, eta_b, noise):
    """eta at tau for the chain from (s,z) pinned at (tau_b, eta_b), and ell(tau, eta; tau_b, eta_b).

    The residual eta_b - e^{h2 B} eta splits into C(h2) S^{-1} r, with
    r = eta_b - e^{(tau_b - s)B} z and S = C(tau_b - s), minus the image of
    the noise. Neither piece involves cancelling large terms, so the score is
    accurate for arbitrarily small gaps. Covariances use the precision form.
    """
    d = noise.shape[-1] // 2
    h1 = np.maximum(tau - s, 1e-14)
    h2 = np.maximum(tau_b - tau, 1e-14)
    c2 = _cov2(kappa, h2)
    p1 = _inv2(_cov2(kappa, h1))
    p2 = _inv2(c2)
    e2 = np.zeros(np.shape(h2) + (2, 2))
    e2[..., 0, 0] = e2[..., 1, 1] = 1.0
    e2[..., 0, 1] = h2
    cov_b = _inv2(p1 + np.swapaxes(e2, -1, -2) @ p2 @ e2)
    cov_b = 0.5 * (cov_b + np.swapaxes(cov_b, -1, -2))
    l11, l21, l22 = _chol2(cov_b)
    s_inv = _inv2(_cov2(kappa, h1 + h2))
    r = eta_b - shift(h1 + h2, z)
    u = _mat_apply(s_inv, r)                       # S^{-1} r
    mu_w = _mat_apply(c2, u)                       # mean of the residual
    lg = _apply2(l11, l21, l22, noise, d)
    elg = shift(h2, lg)                            # e^{h2 B} L g
    eta = shift(-h2, eta_b - mu_w) + lg
    g = u - _mat_apply(p2, elg)                    # C(h2)^{-1} residual
    hh = h2[..., None]
    return eta, hh * g[..., :d] + g[..., d:]


# ---------------------------------------------------------------- bridge tree

def _bridge_expectation(field_: DriftField, kappa: float, s: float, z, t: float, y,
                        m: int, lead: bool, orders: Sequence, tail: Optional[Callable] = None) -> float:
    """Integral over s < tau_1 < ... < tau_m < t of the bridge expectation of

        [F(s,z).ell(s,z;tau_1,eta_1)]^lead * prod_i F(tau_i,eta_i).ell(tau_i,eta_i;tau_{i+1},eta_{i+1})

    with (tau_{m+1}, eta_{m+1}) = (t, y). If `tail` is given, the factor of the
    last gap is replaced by tail(tau_m, eta_m) (used to chain an arbitrary
    right factor).
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    d = dim_of_phase(z)
    targets = np.atleast_2d(y)
    tau_b = np.full(targets.shape[0], float(t))
    eta_b = targets
    wgt = np.ones(targets.shape[0])
    for level in range(m):
        n_t, n_s = orders[level]
        tau, wt = _cos_map(np.full(tau_b.shape, s), tau_b, n_t)          # (L, n_t)
        nodes, wh = _hermite_tensor(n_s, 2 * d)                         # (Ns, 2d)
        eta, score = _bridge_step(kappa, s, z, tau[:, :, None], tau_b[:, None, None],
                                  eta_b[:, None, None, :], nodes[None, None, :, :])
        tau_full = np.broadcast_to(tau[:, :, None], eta.shape[:-1])
        if level == 0 and tail is not None:
            factor = tail(tau_full, eta)
        else:
            factor = _drift_dot(field_, tau_full, eta, score)
        wgt = (wgt[:, None, None] * wt[:, :, None] * wh[None, None, :] * factor).ravel()
        tau_b = tau_full.ravel()
        eta_b = eta.reshape(-1, 2 * d)
    if lead:
        s_arr = np.full(tau_b.shape, float(s))
        z_arr = np.broadcast_to(z, eta_b.shape)
        if m == 0 and tail is not None:
            raise ValueError("tail factor needs at least one intermediate point")
        wgt = wgt * _drift_dot(field_, s_arr, z_arr, ell(kappa, s_arr, z_arr, tau_b, eta_b))
    # leaves are stored target-major
    per_target = wgt.reshape(targets.shape[0], -1).sum(axis=1)
    return per_target if y.ndim == 2 else float(per_target[0])


def _chain_expectation(field_: DriftField, kappa: float, s: float, z, t: float,
                       g: Callable[[np.ndarray], np.ndarray], m: int, orders: Sequence,
                       final_order: int) -> float:
    """int P(s,z;tau_1,.) phi_1 ... phi_1(tau_m,.;t,y) g(y) dy over the time simplex, forward in time."""
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    batch = np.atleast_2d(z)
    nz = batch.shape[0]
    tau_a = np.full(nz, float(s))
    eta_a = batch
    wgt = np.ones(nz)
    for level in range(m):
        n_t, n_s = orders[level]
        tau, wt = _cos_map(tau_a, np.full(tau_a.shape, float(t)), n_t)
        nodes, wh = _hermite_tensor(n_s, 2 * d)
        ta = np.broadcast_to(tau_a[:, None, None], tau.shape + (len(wh),))
        ea = np.broadcast_to(eta_a[:, None, None, :], ta.shape + (2 * d,))
        tau_full = np.broadcast_to(tau[:, :, None], ta.shape)
        eta, score = _forward_step(kappa, ta, ea, tau_full, np.broadcast_to(nodes, ea.shape))
        w = wgt[:, None, None] * wt[:, :, None] * wh[None, None, :]
        if level > 0:
            w = w * _drift_dot(field_, ta, ea, score)
        wgt = w.ravel()
        tau_a = tau_full.ravel()
        eta_a = eta.reshape(-1, 2 * d)
    nodes, wh = _hermite_tensor(final_order, 2 * d)
    ta = np.broadcast_to(tau_a[:, None], (tau_a.size, len(wh)))
    ea = np.broadcast_to(eta_a[:, None, :], ta.shape + (2 * d,))
    yy, score = _forward_step(kappa, ta, ea, np.full(ta.shape, float(t)), np.broadcast_to(nodes, ea.shape))
    w = wgt[:, None] * wh[None, :] * g(yy)
    if m > 0:
        w = w * _drift_dot(field_, ta, ea, score)
    # leaves are stored origin-major, so each starting point owns a contiguous block
    per_origin = w.reshape(nz, -1).sum(axis=1)
    return per_origin if z.ndim == 2 else float(per_origin[0])


# ---------------------------------------------------------------- series terms

def phi1(field_: DriftField, sigma: float, s, z, t, y,
         convention=CovarianceConvention.GENERATOR) -> np.ndarray:
    """phi_1 = F(s,z) . grad_v P^sigma(s,z;t,y)."""
    if np.any(np.asarray(t) - np.asarray(s) <= 0):
        raise ValueError("need s < t")
    return np.sum(evaluate(field_, s, z) * gk.grad_v_P(sigma, s, z, t, y, convention), axis=-1)


def phi_next(field_: DriftField, sigma: float, phi_k: Callable, s: float, z, t: float, y,
             time_order: int = 16, space_order: int = 24,
             convention=CovarianceConvention.GENERATOR) -> float:
    """One Volterra step: int_s^t int phi_1(s,z;tau,eta) phi_k(tau,eta;t,y) d eta d tau.

    `phi_k(tau, eta, t, y)` must accept arrays of tau and eta. Space nodes are
    Gauss-Hermite in the whitened coordinates of the Gaussian bridge from
    (s,z) to (t,y); time nodes come from the cosine map on (s, t).
    """
    if time_order < 2 or space_order < 2:
        raise ValueError("quadrature order must be at least 2")
    if not s < t:
        raise ValueError("need s < t")
    kappa = gk._kappa(sigma, convention)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if field_.is_zero:
        return 0.0

    def right(tau, eta):
        ratio = phi_k(tau, eta, t, y) / gk.eval_P(sigma, tau, eta, t, y, convention)
        if not np.all(np.isfinite(ratio)):
            raise FloatingPointError("non-finite intermediate in phi_next")
        return ratio

    val = _bridge_expectation(field_, kappa, s, z, t, y, 1, True, [(time_order, space_order)], tail=right)
    return val * float(gk.eval_P(sigma, s, z, t, y, convention))


def phi_n(field_: DriftField, config: ParametrixConfig, n: int, s: float, z, t: float, y) -> float:
    """n-th Neumann term phi_1 (x) ... (x) phi_1 (n factors) evaluated at one point."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if field_.is_zero:
        return 0.0
    z = np.asarray(z, dtype=float)
    orders = config.level_orders(n - 1, dim_of_phase(z))
    r = _bridge_expectation(field_, config.kappa, s, z, t, y, n - 1, True, orders)
    return r * float(gk.eval_P(config.sigma, s, z, t, y, config.convention))


def series_ratios(field_: DriftField, config: ParametrixConfig, s: float, z, t: float, y,
                  N: Optional[int] = None) -> np.ndarray:
    """[1, R_1, ..., R_N] with R_k = (P (x) phi_1^k)(s,z;t,y) / P(s,z;t,y)."""
    N = config.N if N is None else N
    out = np.zeros(N + 1)
    out[0] = 1.0
    if field_.is_zero:
        return out
    d = dim_of_phase(np.asarray(z))
    for k in range(1, N + 1):
        out[k] = _bridge_expectation(field_, config.kappa, s, z, t, y, k, False, config.level_orders(k, d))
    return out


# ---------------------------------------------------------------- bound functions

def H_function(sigma, beta, y, t, C_beta: float = 1.0) -> np.ndarray:
    """C_beta (|nu| + (|xi| + t|nu|)^(1/3) + ((beta sigma^d + beta^(1/3) sigma^(d/3)) t)^(1/2))^beta."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    y = np.asarray(y, dtype=float)
    d = dim_of_phase(y)
    xi = np.linalg.norm(y[..., :d], axis=-1)
    nu = np.linalg.norm(y[..., d:], axis=-1)
    inner = nu + np.cbrt(xi + t * nu) + np.sqrt((beta * sigma**d + beta ** (1 / 3) * sigma ** (d / 3)) * t)
    return C_beta * inner**beta


def J_function(T, sigma, beta, C_beta: float = 1.0, d: int = 1) -> float:
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    return C_beta * (T ** (beta / 3) + ((beta * sigma**d + beta ** (1 / 3) * sigma ** (d / 3)) * T) ** (beta / 2))


def K_constant(config: ParametrixConfig, T: Optional[float] = None, d: int = 1) -> float:
    T = config.T if T is None else T
    S = config.eps_sum
    if S >= 1:
        raise ValueError("sum of eps_n must be < 1")
    e1 = float(config.eps_n(1))
    sig1 = (config.sigma + config.delta) / e1 ** (1 / d)
    return float(np.sqrt(1 + e1 / (1 - S)) * (1 + J_function(T, sig1, config.beta, config.C_beta, d)
                                               + config.C_beta * (1 + T ** (config.beta / 3))))


def induction_bound(n: int, config: ParametrixConfig, field_: DriftField, s: float, z, t: float, y,
                    C_grad: Optional[float] = None) -> float:
    """Right-hand side of the n-th term estimate with the configured (fitted) constants."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    d = dim_of_phase(z)
    S = config.eps_sum
    C = C_grad if C_grad is not None else (config.C_grad if config.C_grad is not None else 1.0)
    K = K_constant(config, d=d)
    h = t - s
    eps_j = config.eps_n(np.arange(1, n + 1))
    lam_n = (config.sigma + config.delta) / (1 - eps_j.sum()) ** (1 / d)
    hs = H_function((config.sigma + config.delta) / eps_j ** (1 / d), config.beta, y[None, :],
                    config.T, config.C_beta)
    log_coef = ((n - 1) * np.log(K) + 0.5 * n * np.log(np.pi) + 0.5 * (n - 2) * np.log(h)
                - special.gammaln(n / 2) + n * np.log(d * field_.growth_C * C) - 0.5 * n * np.log(1 - S))
    log_p = float(gk.log_P(lam_n, s, z, t, y, config.convention))
    return float(np.exp(log_coef + log_p + np.sum(np.log1p(hs))))


def tail_bound(config: ParametrixConfig, field_: DriftField, s: float, z, t: float, y,
               n_extra: int = 60) -> float:
    """Bound on the discarded part sum_{n>N} int int P phi_n, from the term estimates."""
    if field_.is_zero:
        return 0.0
    d = dim_of_phase(np.asarray(z))
    total = 0.0
    for n in range(config.N + 1, config.N + 1 + n_extra):
        eps_j = config.eps_n(np.arange(1, n + 1))
        lam_n = (config.sigma + config.delta) / (1 - eps_j.sum()) ** (1 / d)
        # P^sigma <= (lam_n / sigma)^d P^lam_n, then Chapman-Kolmogorov and the time integral
        b = induction_bound(n, config, field_, s, z, t, y) / max((t - s) ** (0.5 * (n - 2)), 1e-300)
        term = (lam_n / config.sigma) ** d * b * (t - s) ** (n / 2) * (2.0 / n)
        total += term
        if n > config.N + 5 and term < 1e-16 * max(total, 1e-300):
            break
    return float(total)


def fit_C_beta(beta: float, d: int = 1, n: int = 10_000, seed: int = 0,
               convention=CovarianceConvention.GENERATOR) -> float:
    """Max over random (z, y, s, t, sigma) of |z|_B^beta exp(-q/2) / H_{sigma,beta}(y; t-s) with C_beta = 1."""
    rng = gk.stream(seed, 7)
    z = rng.standard_normal((n, 2 * d)) * np.exp(rng.uniform(-2, 2, (n, 1)))
    y = rng.standard_normal((n, 2 * d)) * np.exp(rng.uniform(-2, 2, (n, 1)))
    h = np.exp(rng.uniform(np.log(1e-3), np.log(3.0), n))
    sig = np.exp(rng.uniform(np.log(0.1), np.log(10.0), n))
    kappa = np.array([gk._kappa(si, convention) for si in sig])
    w = y - shift(h, z)
    ixx, ixv, ivv = 12 / (kappa * h**3), -6 / (kappa * h**2), 4 / (kappa * h)
    wx, wv = w[:, :d], w[:, d:]
    q = np.sum(ixx[:, None] * wx**2 + 2 * ixv[:, None] * wx * wv + ivv[:, None] * wv**2, axis=-1)
    lhs = b_norm(z) ** beta * np.exp(-0.5 * q)
    return float(np.max(lhs / H_function(sig, beta, y, h, 1.0)))


# ---------------------------------------------------------------- evaluation

@dataclass
class PointValue:
    value: float
    tail_bound: float
    terms: np.ndarray
    negative: bool


def constant_drift_density(c, sigma, s, z, t, y, convention=CovarianceConvention.GENERATOR) -> np.ndarray:
    """Exact density for constant drift: driftless covariance, mean shifted by (c h^2/2, c h)."""
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    c = np.broadcast_to(np.asarray(c, dtype=float), (d,))
    h = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
    off = np.concatenate([c * (h[..., None] if np.ndim(h) else h) ** 2 / 2,
                          c * (h[..., None] if np.ndim(h) else h)], axis=-1)
    return gk.eval_P(sigma, s, z, t, np.asarray(y) - off, convention)


def eval_p(field_: DriftField, config: ParametrixConfig, s: float, z, t: float, y,
           tol: Optional[float] = None, with_tail: bool = True) -> PointValue:
    """Truncated parametrix p_N(s,z;t,y) with the estimated size of the discarded tail."""
    if not 0 <= s < t:
        raise ValueError("need 0 <= s < t")
    if config.mode == "montecarlo":
        est, se = mc_eval_p(field_, config, s, z, t, y)
        return PointValue(est, se, np.array([est]), est < 0)
    base = float(gk.eval_P(config.sigma, s, z, t, y, config.convention))
    terms = series_ratios(field_, config, s, z, t, y) * base
    value = float(np.sum(terms))
    tb = tail_bound(config, field_, s, z, t, y) if with_tail else float("nan")
    if tol is not None and tb > tol:
        warnings.warn(f"tail bound {tb:.3e} exceeds tolerance {tol:.1e}; "
                      f"try N >= {suggest_depth(config, field_, s, z, t, y, tol)}")
    return PointValue(value, tb, terms, value < 0)


def suggest_depth(config: ParametrixConfig, field_: DriftField, s, z, t, y, tol: float,
                  max_N: int = 60) -> int:
    for N in range(config.N, max_N):
        if tail_bound(replace(config, N=N), field_, s, z, t, y) <= tol:
            return N
    return max_N


def _outer_terms(field_: DriftField, config: ParametrixConfig, s: float, z, t: float,
                 g: Callable[[np.ndarray], np.ndarray], k: int) -> float:
    """int P(s,z;t,y) R_k(s,z;t,y) g(y) dy with Gauss-Hermite nodes in y and pointwise bridge ratios."""
    d = dim_of_phase(z)
    l11, l21, l22 = _chol2(_cov2(config.kappa, np.array(t - s)))
    nodes, wh = _hermite_tensor(config.outer_order, 2 * d)
    ys = shift(t - s, z) + _apply2(l11, l21, l22, nodes, d)
    gy = np.asarray(g(ys), dtype=float)
    keep = gy != 0
    ys, wh, gy = ys[keep], wh[keep], gy[keep]
    orders = config.level_orders(k, d)
    leaves = int(np.prod([nt * ns ** (2 * d) for nt, ns in orders]))
    chunk = max(1, 2_000_000 // leaves)
    total = 0.0
    for i in range(0, len(ys), chunk):
        r = _bridge_expectation(field_, config.kappa, s, z, t, ys[i:i + chunk], k, False, orders)
        total += float(np.sum(wh[i:i + chunk] * gy[i:i + chunk] * r))
    return total


def integrate_p(field_: DriftField, config: ParametrixConfig, s: float, z, t: float,
                g: Callable[[np.ndarray], np.ndarray], N: Optional[int] = None,
                final_order: Optional[int] = None) -> np.ndarray:
    """Per-term contributions to int p_N(s,z;t,y) g(y) dy.

    Terms 0 and 1 run the forward chain with tensor quadrature. Deeper terms
    would starve the tensor tree, so they integrate the pointwise bridge
    ratios against Gauss-Hermite nodes in y (config.outer_order per axis).
    For a batch z of shape (n, 2d) the result has shape (N + 1, n).
    """
    N = config.N if N is None else N
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    batch = np.atleast_2d(z)
    fo = final_order if final_order is not None else min(config.space_order, 8)
    out = np.zeros((N + 1, batch.shape[0]))
    out[0] = _chain_expectation(field_, config.kappa, s, batch, t, g, 0, [], config.space_order)
    if not field_.is_zero and N >= 1:
        inner = replace(config, leaf_budget=max(config.leaf_budget // fo ** (2 * d), 1000))
        orders = inner.level_orders(1, d)
        leaves = fo ** (2 * d) * orders[0][0] * orders[0][1] ** (2 * d)
        chunk = max(1, 4_000_000 // leaves)
        for i in range(0, batch.shape[0], chunk):
            out[1, i:i + chunk] = _chain_expectation(field_, config.kappa, s, batch[i:i + chunk], t, g,
                                                     1, orders, fo)
        for k in range(2, N + 1):
            out[k] = [_outer_terms(field_, config, s, zi, t, g, k) for zi in batch]
    return out if z.ndim == 2 else out[:, 0]


def normalization(field_: DriftField, config: ParametrixConfig, s: float, z, t: float,
                  order: int = 10) -> float:
    """int p_N(s,z;t,y) dy by Gauss-Hermite over y of pointwise values."""
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    h = t - s
    l11, l21, l22 = _chol2(_cov2(config.kappa, np.array(h)))
    nodes, wh = _hermite_tensor(order, 2 * d)
    ys = shift(h, z) + _apply2(l11, l21, l22, nodes, d)
    total = 0.0
    for yk, wk in zip(ys, wh):
        total += wk * float(np.sum(series_ratios(field_, config, s, z, t, yk)))
    return total


# ---------------------------------------------------------------- Monte Carlo twin

def _dirichlet_times(rng, s, t, k, n, lead):
    """Ordered times s < tau_1 < ... < tau_k < t with density proportional to the gap singularities."""
    alphas = np.full(k + 1, 0.5)
    if not lead:
        alphas[0] = 1.0
    gaps = rng.dirichlet(alphas, size=n)
    tau = s + (t - s) * np.cumsum(gaps[:, :-1], axis=1)
    log_dens = (special.gammaln(alphas.sum()) - special.gammaln(alphas).sum()
                + np.sum((alphas - 1) * np.log(gaps), axis=1) - k * np.log(t - s))
    return tau, log_dens


def mc_eval_p(field_: DriftField, config: ParametrixConfig, s: float, z, t: float, y,
              paths: Optional[int] = None) -> tuple:
    """Importance-sampled estimate of p_N(s,z;t,y) and its standard error."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    d = dim_of_phase(z)
    base = float(gk.eval_P(config.sigma, s, z, t, y, config.convention))
    if field_.is_zero or config.N == 0:
        return base, 0.0
    n = config.mc_paths if paths is None else paths
    kappa = config.kappa
    est, var = base, 0.0
    for k in range(1, config.N + 1):
        rng = gk.stream(config.seed, k)
        tau, log_dens = _dirichlet_times(rng, s, t, k, n, lead=False)
        tau_b = np.full(n, float(t))
        eta_b = np.broadcast_to(y, (n, 2 * d)).copy()
        wgt = np.exp(-log_dens)
        for i in range(k - 1, -1, -1):
            ti = tau[:, i]
            eta, score = _bridge_step(kappa, s, z, ti, tau_b, eta_b, rng.standard_normal((n, 2 * d)))
            wgt = wgt * _drift_dot(field_, ti, eta, score)
            tau_b, eta_b = ti, eta
        est += base * wgt.mean()
        var += base**2 * wgt.var(ddof=1) / n
    se = float(np.sqrt(var))
    if se > 0.5 * abs(est):
        warnings.warn("Monte Carlo estimate unreliable: standard error above half the estimate")
    return float(est), se


def mc_integrate_p(field_: DriftField, config: ParametrixConfig, s: float, z, t: float,
                   g: Callable[[np.ndarray], np.ndarray], paths: Optional[int] = None) -> tuple:
    """Monte Carlo estimate of int p_N(s,z;t,y) g(y) dy and its standard error, any d."""
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    n = config.mc_paths if paths is None else paths
    kappa = config.kappa
    rng = gk.stream(config.seed, 0)
    y0 = gk.sample(config.sigma, s, z, t, n, config.seed, config.convention, call_index=100)
    vals = g(y0)
    est, var = float(vals.mean()), float(vals.var(ddof=1) / n)
    if field_.is_zero:
        return est, float(np.sqrt(var))
    for k in range(1, config.N + 1):
        rng = gk.stream(config.seed, 100 + k)
        tau, log_dens = _dirichlet_times(rng, s, t, k, n, lead=False)
        wgt = np.exp(-log_dens)
        ta, ea = np.full(n, float(s)), np.broadcast_to(z, (n, 2 * d)).copy()
        for i in range(k):
            ti = tau[:, i]
            eta, score = _forward_step(kappa, ta, ea, ti, rng.standard_normal((n, 2 * d)))
            if i > 0:
                wgt = wgt * _drift_dot(field_, ta, ea, score)
            ta, ea = ti, eta
        yy, score = _forward_step(kappa, ta, ea, np.full(n, float(t)), rng.standard_normal((n, 2 * d)))
        # the score has mean zero given the last point, so g at the free-flow mean is a free control variate
        wgt = wgt * _drift_dot(field_, ta, ea, score) * (g(yy) - g(shift(t - ta, ea)))
        est += float(wgt.mean())
        var += float(wgt.var(ddof=1) / n)
    return est, float(np.sqrt(var))


# ---------------------------------------------------------------- diagnostics

@dataclass
class SeriesDiagnostics:
    term_sup: np.ndarray
    ratios: np.ndarray
    bounds: np.ndarray
    bound_holds: bool
    K: float
    J: float
    eps_sum: float
    C_beta: float
    C_grad: float
    tail_estimate: float
    summable: bool
    points: int = 0
    details: dict = field(default_factory=dict)


def series_convergence_report(field_: DriftField, config: ParametrixConfig, eval_set: Sequence,
                              n_max: int = 4, C_beta: Optional[float] = None,
                              C_grad: Optional[float] = None) -> SeriesDiagnostics:
    """Sup norms of phi_1..phi_n_max over eval_set against the term estimates.

    eval_set is a sequence of (s, z, t, y). Constants not supplied are fitted:
    C_beta from the Gaussian-weight bound, C_grad from the derivative bound.
    """
    cfg = with_field_beta(config, field_)
    d = field_.d
    if C_beta is None:
        C_beta = fit_C_beta(cfg.beta, d, convention=cfg.convention)
    if C_grad is None:
        C_grad = gk.fit_gradient_constant(cfg.sigma, cfg.delta, d=d, convention=cfg.convention)
    cfg = replace(cfg, C_beta=C_beta, C_grad=C_grad)
    sup = np.zeros(n_max)
    bnd_ok = True
    bounds = np.zeros(n_max)
    for (s, z, t, y) in eval_set:
        for n in range(1, n_max + 1):
            val = abs(phi_n(field_, cfg, n, s, z, t, y))
            b = induction_bound(n, cfg, field_, s, z, t, y)
            sup[n - 1] = max(sup[n - 1], val)
            bounds[n - 1] = max(bounds[n - 1], b)
            if val > b:
                bnd_ok = False
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(sup[:-1] > 0, sup[1:] / sup[:-1], 0.0)
    K = K_constant(cfg, d=d)
    e1 = float(cfg.eps_n(1))
    J = J_function(cfg.T, (cfg.sigma + cfg.delta) / e1 ** (1 / d), cfg.beta, C_beta, d)
    # quotient criterion on the S1-type majorant (2 M)^n n^(1/4) / (2^(n/2) sqrt(n!))
    nn = np.arange(1, 200)
    M5 = max(float(np.max(ratios)) if ratios.size else 0.0, 1e-12)
    log_terms = nn * np.log(2 * M5) + 0.25 * np.log(nn) - 0.5 * nn * np.log(2) - 0.5 * special.gammaln(nn + 1)
    summable = bool(np.all(np.diff(log_terms[-20:]) < 0))
    tail = float(sup[-1] * np.sum(np.exp(log_terms[n_max:] - log_terms[n_max - 1]))) if sup[-1] > 0 else 0.0
    return SeriesDiagnostics(sup, ratios, bounds, bnd_ok, K, J, cfg.eps_sum, C_beta, C_grad,
                             tail, summable, len(eval_set))


@dataclass
class SandwichResult:
    C_upper: float
    c_lower: float
    lam_lower: float
    min_p: float
    negative_at: list
    passed: bool


def gaussian_sandwich_check(field_: DriftField, config: ParametrixConfig, grid: Sequence,
                            eps: float = 0.1, lam_grid=None) -> SandwichResult:
    """Smallest C with p <= C P^{sigma+eps} and best c with c P^lam <= p over lam_grid."""
    if lam_grid is None:
        lam_grid = config.sigma * np.geomspace(1.0, 8.0, 13)
    vals, logs_up, logs_lo = [], [], []
    neg = []
    for (s, z, t, y) in grid:
        if t - s < 0.05:
            raise ValueError("grid points must keep t - s >= 0.05")
        pv = eval_p(field_, config, s, z, t, y, with_tail=False).value
        vals.append(pv)
        if pv < 0:
            neg.append((s, list(np.ravel(z)), t, list(np.ravel(y))))
        logs_up.append(float(gk.log_P(config.sigma + eps, s, z, t, y, config.convention)))
        logs_lo.append([float(gk.log_P(lam, s, z, t, y, config.convention)) for lam in lam_grid])
    vals = np.asarray(vals)
    if neg:
        return SandwichResult(float("nan"), float("nan"), float("nan"), float(vals.min()), neg, False)
    C_up = float(np.max(vals / np.exp(logs_up)))
    logs_lo = np.asarray(logs_lo)
    c_by_lam = np.min(vals[:, None] / np.exp(logs_lo), axis=0)
    best = int(np.argmax(c_by_lam))
    c_lo = float(c_by_lam[best])
    ok = np.isfinite(C_up) and np.isfinite(c_lo) and c_lo > 0
    return SandwichResult(C_up, c_lo, float(lam_grid[best]), float(vals.min()), [], bool(ok))
