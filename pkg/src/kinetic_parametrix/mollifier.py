"""Group-convolution mollifiers rho_eps * f adapted to the kinetic dilations.

The reference bump rho is a product of one-dimensional bumps in (t, x, v)
centred at (3/2, 0, 0). Half-widths are chosen so every point of its support
has homogeneous distance below 1 from the centre, which keeps rho smooth
(composing a bump with the gauge itself would not be, since |x|^(1/3) has a
cusp at 0).
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .gaussian_kernel import stream
from .lie_group import compose, dilate, homogeneous_norm, inverse, lie_derivative_fd

CENTER_T = 1.5


def _bump(u):
    """exp(-1/(1 - u^2)) on (-1, 1), zero outside."""
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1
    safe = np.where(inside, u, 0.0)
    return np.where(inside, np.exp(-1.0 / (1.0 - safe**2)), 0.0)


def _bump_prime(u):
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1
    safe = np.where(inside, u, 0.0)
    return np.where(inside, _bump(safe) * (-2 * safe) / (1 - safe**2) ** 2, 0.0)


BUMP_MASS = integrate.quad(lambda u: float(_bump(u)), -1, 1, epsabs=0.0, epsrel=1e-13, limit=200)[0]


@dataclass(frozen=True)
class MollifierKernel:
    d: int = 1
    order: int = 16

    @property
    def half_widths(self) -> np.ndarray:
        """(t, x..., v...) half-widths; each gauge term stays below 1/(1+2d)."""
        m = 1 + 2 * self.d
        return np.array([1 / m**2] + [1 / m**3] * self.d + [1 / m] * self.d)

    @property
    def normalization(self) -> float:
        return float(np.prod(BUMP_MASS * self.half_widths))

    @property
    def center(self) -> np.ndarray:
        c = np.zeros(1 + 2 * self.d)
        c[0] = CENTER_T
        return c

    def rho(self, p) -> np.ndarray:
        u = (np.asarray(p, dtype=float) - self.center) / self.half_widths
        return np.prod(_bump(u), axis=-1) / self.normalization

    def rho_grad(self, p) -> np.ndarray:
        """Gradient of rho in the (t, x, v) coordinates."""
        u = (np.asarray(p, dtype=float) - self.center) / self.half_widths
        b = _bump(u)
        out = np.empty(u.shape)
        for k in range(u.shape[-1]):
            others = np.prod(np.delete(b, k, axis=-1), axis=-1)
            out[..., k] = _bump_prime(u[..., k]) / self.half_widths[k] * others
        return out / self.normalization

    def nodes(self, order: Optional[int] = None):
        """Tensor Gauss-Legendre nodes on the support box with weights times rho.

        Weights are rescaled to sum to one so constants are reproduced exactly.
        """
        m = self.order if order is None else order
        x, w = np.polynomial.legendre.leggauss(m)
        dim = 1 + 2 * self.d
        grids = np.meshgrid(*([x] * dim), indexing="ij")
        u = np.stack([g.ravel() for g in grids], axis=-1)
        ww = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w] * dim), indexing="ij")], axis=-1), axis=-1)
        pts = self.center + u * self.half_widths
        weights = ww * np.prod(self.half_widths) * self.rho(pts)
        keep = weights > 0
        return pts[keep], weights[keep] / weights[keep].sum()


def scaling_exponent(d: int) -> int:
    """rho_eps = eps^-(4d+2) rho(Phi_(1/eps) .): the Jacobian of the dilation on R^(1+2d)."""
    return 4 * d + 2


def rho_eps(kernel: MollifierKernel, eps: float, point) -> np.ndarray:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return eps ** (-scaling_exponent(kernel.d)) * kernel.rho(dilate(1 / eps, point))


def min_time(eps: float) -> float:
    return 2.5 * eps**2


def _check_times(p, eps):
    if np.any(np.asarray(p)[..., 0] <= min_time(eps)):
        raise ValueError(f"convolution needs t > {min_time(eps):.6g}")


def group_convolve(kernel: MollifierKernel, eps: float, f: Callable[[np.ndarray], np.ndarray], point,
                   order: Optional[int] = None) -> np.ndarray:
    """f_eps(p) = int rho(q) f(Phi_eps(q)^-1 o p) dq over the reference support.

    `f` takes space-time points (..., 1+2d) and may return trailing vector axes.
    """
    p = np.asarray(point, dtype=float)
    _check_times(p, eps)
    q, w = kernel.nodes(order)
    shifted = compose(inverse(dilate(eps, q))[None], p.reshape(-1, 1, p.shape[-1]))
    vals = np.asarray(f(shifted))
    return np.einsum("k,nk...->n...", w, vals).reshape(p.shape[:-1] + vals.shape[2:])


def support_check(kernel: MollifierKernel, eps: float, n: int = 20_000, seed: int = 0) -> dict:
    """Rejection sample the support box; positive rho_eps must sit in the dilated unit ball."""
    rng = stream(seed, 21)
    box = dilate(eps, kernel.center + kernel.half_widths * rng.uniform(-1.2, 1.2, (n, 1 + 2 * kernel.d)))
    vals = rho_eps(kernel, eps, box)
    centre = dilate(eps, kernel.center)
    dist = homogeneous_norm(compose(inverse(centre), box)) / eps
    return dict(nonnegative=bool(np.all(vals >= 0)), positive=int(np.sum(vals > 0)),
                outside=int(np.sum((vals > 0) & (dist >= 1))))


def mc_mass(kernel: MollifierKernel, eps: float, n: int = 200_000, seed: int = 0):
    """Monte Carlo estimate of int rho_eps over its dilated support box, with SE."""
    rng = stream(seed, 22)
    dim = 1 + 2 * kernel.d
    lo = dilate(eps, kernel.center - kernel.half_widths)
    hi = dilate(eps, kernel.center + kernel.half_widths)
    pts = lo + (hi - lo) * rng.uniform(size=(n, dim))
    vals = rho_eps(kernel, eps, pts) * np.prod(hi - lo)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))


def quadrature_mass(kernel: MollifierKernel, eps: float, order: int = 48) -> float:
    """int rho_eps by tensor Gauss-Legendre over the dilated support box."""
    x, w = np.polynomial.legendre.leggauss(order)
    dim = 1 + 2 * kernel.d
    lo = dilate(eps, kernel.center - kernel.half_widths)
    hi = dilate(eps, kernel.center + kernel.half_widths)
    mesh = np.meshgrid(*([x] * dim), indexing="ij")
    pts = lo + (hi - lo) * (np.stack([g.ravel() for g in mesh], -1) + 1) / 2
    ww = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w] * dim), indexing="ij")], -1), -1)
    return float(np.sum(ww * rho_eps(kernel, eps, pts)) * np.prod((hi - lo) / 2))


@dataclass
class CommutationReport:
    eps: float
    max_residual: float
    budget: float
    points: int
    passed: bool


def commutation_check(kernel: MollifierKernel, eps: float, f, Yf, grid, h: float = 1e-4,
                      order: Optional[int] = None) -> CommutationReport:
    """max |Y(f_eps) - (Yf)_eps| with Y by central differences along the transport flow.

    The budget is a Richardson estimate of the difference error (steps h and
    2h) plus a quadrature error estimate (orders m and m - 4), times 10.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    _check_times(grid - np.array([2 * h] + [0] * (grid.shape[-1] - 1)), eps)
    m = kernel.order if order is None else order
    conv = lambda g, o: (lambda p: group_convolve(kernel, eps, g, p, o))
    lhs = lie_derivative_fd(conv(f, m), grid, h)
    lhs2 = lie_derivative_fd(conv(f, m), grid, 2 * h)
    rhs = conv(Yf, m)(grid)
    rhs_lo = conv(Yf, m - 4)(grid)
    res = float(np.max(np.abs(lhs - rhs)))
    budget = 10 * float(np.max(np.abs(lhs - lhs2)) + np.max(np.abs(rhs - rhs_lo))) + 1e-9
    return CommutationReport(eps, res, budget, grid.shape[0], res <= budget)


def convolved_derivatives(kernel: MollifierKernel, eps: float, f, box_lo, box_hi, points, order: int = 12):
    """(d_t, grad_x, grad_v) of f_eps with the derivatives moved onto rho_eps.

    f_eps(p) = int rho_eps(p o xi^-1) f(xi) d xi, integrated over the box
    [box_lo, box_hi] containing the support of f.
    """
    d = kernel.d
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = np.asarray(box_lo, float), np.asarray(box_hi, float)
    dim = 1 + 2 * d
    mesh = np.meshgrid(*([x] * dim), indexing="ij")
    u = np.stack([g.ravel() for g in mesh], axis=-1)
    ww = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w] * dim), indexing="ij")], -1), -1)
    xi = lo + (hi - lo) * (u + 1) / 2
    ww = ww * np.prod((hi - lo) / 2) * np.asarray(f(xi))
    p = np.atleast_2d(np.asarray(points, float))
    _check_times(p, eps)
    r = compose(p[:, None, :], inverse(xi)[None])
    scale = eps ** -np.array([2.0] + [3.0] * d + [1.0] * d)
    g = kernel.rho_grad(dilate(1 / eps, r)) * scale * eps ** (-scaling_exponent(d))
    s = xi[None, :, 0:1]
    dt = np.einsum("k,nk->n", ww, g[..., 0])
    dx = np.einsum("k,nki->ni", ww, g[..., 1:1 + d])
    dv = np.einsum("k,nki->ni", ww, g[..., 1 + d:] - s * g[..., 1:1 + d])
    return dt, dx, dv


@dataclass
class DerivativeFit:
    eps: list
    constants: dict
    spread: dict
    stable: dict
    l1_norm: float


def derivative_bound_check(kernel: MollifierKernel, f, box_lo, box_hi, eps_list=(0.5, 0.25, 0.125),
                           T: float = 1.0, order: int = 12, probes: int = 7) -> DerivativeFit:
    """Fit C in |D f_eps| <= C eps^-k |f|_L1 for each derivative and eps.

    Exponents: d_t 4d+4, d_x 4d+5, d_v 4d+3 with a factor T (as stated),
    and d_v 4d+5 with a factor T (what moving the derivative onto rho gives).
    The probe points p = Phi_eps(q) o xi_c cover the support of
    rho_eps(. o xi_c^-1) for the centre xi_c of the box.
    """
    d = kernel.d
    lo, hi = np.asarray(box_lo, float), np.asarray(box_hi, float)
    x, w = np.polynomial.legendre.leggauss(order)
    dim = 1 + 2 * d
    mesh = np.meshgrid(*([x] * dim), indexing="ij")
    u = np.stack([g.ravel() for g in mesh], axis=-1)
    ww = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w] * dim), indexing="ij")], -1), -1)
    l1 = float(np.sum(ww * np.prod((hi - lo) / 2) * np.abs(f(lo + (hi - lo) * (u + 1) / 2))))
    c = (lo + hi) / 2
    lin = np.linspace(-0.95, 0.95, probes)
    q_ref = kernel.center + np.stack([g.ravel() for g in np.meshgrid(*([lin] * dim), indexing="ij")], -1) \
        * kernel.half_widths
    powers = {"t": (4 * d + 4, 1.0), "x": (4 * d + 5, 1.0), "v_stated": (4 * d + 3, T), "v_proof": (4 * d + 5, T)}
    consts = {k: [] for k in powers}
    for eps in eps_list:
        pts = compose(dilate(eps, q_ref), c)
        dt, dx, dv = convolved_derivatives(kernel, eps, f, lo, hi, pts, order)
        sup = {"t": np.max(np.abs(dt)), "x": np.max(np.abs(dx)), "v_stated": np.max(np.abs(dv)),
               "v_proof": np.max(np.abs(dv))}
        for k, (pw, fac) in powers.items():
            consts[k].append(float(sup[k] * eps**pw / (fac * l1)) if l1 > 0 else 0.0)
    spread = {k: (max(v) / min(v) if min(v) > 0 else (1.0 if max(v) == 0 else np.inf)) for k, v in consts.items()}
    return DerivativeFit(list(eps_list), consts, spread, {k: bool(s <= 3) for k, s in spread.items()}, l1)


@dataclass
class CaratheodoryTable:
    eps: list
    differences: list
    mean_abs_differences: list
    reference: float
    reference_se: float
    decreasing: bool
    final_within_noise: bool


def caratheodory_limit_check(kernel: MollifierKernel, f, G, flow, t: float, T: float,
                             eps_list=(0.3, 0.2, 0.1, 0.05, 0.025), order: int = 8) -> CaratheodoryTable:
    """|int_t^T int G . f_eps d mu_s ds - int_t^T int G . f d mu_s ds| as eps shrinks.

    f and G take space-time points and return (..., d) arrays (or scalars).
    Signed errors can cancel, so monotonicity is judged on the path average
    of |int G . (f_eps - f) ds|, which dominates the table entry. The noise
    level is the SE of the reference integral itself.
    """
    times = np.asarray(flow.times)
    sel = np.flatnonzero((times >= t - 1e-12) & (times <= T + 1e-12))
    if len(sel) < 2:
        raise ValueError("flow needs at least two times in [t, T]")
    if min_time(max(eps_list)) >= times[sel[0]]:
        raise ValueError("t too small for the largest eps")
    live = flow.weights[0] > 0
    ts = times[sel]

    def integrand(fun):
        rows = []
        for k in sel:
            z = flow.samples[k][live]
            p = np.concatenate([np.full((len(z), 1), times[k]), z], axis=1)
            gv = np.asarray(G(p))
            fv = np.asarray(fun(p))
            rows.append(np.sum(np.reshape(gv * fv, (len(z), -1)), axis=-1))
        return np.trapezoid(np.stack(rows), ts, axis=0)

    ref = integrand(f)
    n = ref.size
    ref_se = float(ref.std(ddof=1) / np.sqrt(n))
    diffs, absd = [], []
    for eps in eps_list:
        delta = integrand(lambda p: group_convolve(kernel, eps, f, p, order)) - ref
        diffs.append(float(abs(delta.mean())))
        absd.append(float(np.abs(delta).mean()))
    dec = all(b <= a + 1e-15 for a, b in zip(absd, absd[1:]))
    return CaratheodoryTable(list(eps_list), diffs, absd, float(ref.mean()), ref_se, dec, diffs[-1] <= 3 * ref_se)
