"""Drift fields F(t, z) and empirical checks of their growth and local Hoelder data."""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .lie_group import b_norm, dim_of_phase

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DriftField:
    """Drift with declared growth C(F)(1 + |z|_B^beta) and local Hoelder exponent alpha.

    `holder_L` maps a compact radius R to the declared constant on the ball of
    that radius; `bounded` marks fields with finite sup norm.
    """
    name: str
    evaluator: Evaluator
    d: int
    growth_C: float
    beta: float
    alpha: float = 1.0
    holder_L: Callable[[float], float] = lambda R: 1.0
    sup_norm: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not self.beta < self.alpha <= 1:
            raise ValueError("need beta < alpha <= 1")

    @property
    def bounded(self) -> bool:
        return self.sup_norm is not None

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def __call__(self, t, z) -> np.ndarray:
        return evaluate(self, t, z)


def evaluate(field_: DriftField, t, z) -> np.ndarray:
    """F(t, z) with shape (..., d); raises on non-finite output."""
    z = np.asarray(z, dtype=float)
    if dim_of_phase(z) != field_.d:
        raise ValueError("phase point dimension does not match field")
    t = np.broadcast_to(np.asarray(t, dtype=float), z.shape[:-1])
    out = np.asarray(field_.evaluator(t, z), dtype=float)
    out = np.broadcast_to(out, z.shape[:-1] + (field_.d,))
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.all(np.isfinite(out), axis=-1))[0]
        raise FloatingPointError(f"non-finite drift at t={t[tuple(bad)]}, z={z[tuple(bad)]}")
    return out


def zero_field(d: int = 1) -> DriftField:
    return DriftField("zero", lambda t, z: np.zeros(z.shape[:-1] + (d,)), d,
                      growth_C=1e-12, beta=0.5, holder_L=lambda R: 0.0, sup_norm=0.0)


def constant_field(c, d: int = 1) -> DriftField:
    c = np.broadcast_to(np.asarray(c, dtype=float), (d,)).copy()
    size = float(np.linalg.norm(c))
    return DriftField("constant", lambda t, z: np.broadcast_to(c, z.shape[:-1] + (d,)), d,
                      growth_C=max(size, 1e-12), beta=0.5, holder_L=lambda R: 0.0,
                      sup_norm=size, params={"c": c.tolist()})


def oscillatory_field(amplitude: float = 0.5, d: int = 1) -> DriftField:
    """Bounded smooth field a * sin(x_i + v_i) * cos(t)."""
    def f(t, z):
        return amplitude * np.sin(z[..., :d] + z[..., d:]) * np.cos(t)[..., None]

    # |sin a - sin b| <= min(2, |a-b|) and |x| <= |x|_B^3 <= R^2 |x|_B on the unit-scale ball
    return DriftField("oscillatory", f, d, growth_C=amplitude * np.sqrt(d), beta=0.5, alpha=1.0,
                      holder_L=lambda R: amplitude * np.sqrt(d) * max(1.0, 2 * R) ** 2,
                      sup_norm=amplitude * np.sqrt(d), params={"amplitude": amplitude})


def holder_field(scale: float = 0.5, beta: float = 0.5, d: int = 1, direction_seed: int = 0) -> DriftField:
    """Unbounded field c (1 + |z|_B)^(beta-1) |z|_B u with a fixed unit vector u.

    Grows like |z|_B^beta and is Lipschitz in the B-norm on every ball, so
    alpha = 1 on compacts.
    """
    u = np.random.default_rng(direction_seed).standard_normal(d)
    u = u / np.linalg.norm(u)

    def f(t, z):
        r = b_norm(z)
        return (scale * (1 + r) ** (beta - 1) * r)[..., None] * u

    # r / (1+r)^(1-beta) <= r^beta, and the radial profile has slope <= 1 in r
    return DriftField("holder", f, d, growth_C=scale, beta=beta, alpha=1.0,
                      holder_L=lambda R: scale, params={"scale": scale, "beta": beta,
                                                         "direction": u.tolist()})


BUILTIN = {
    "zero": zero_field,
    "constant": constant_field,
    "oscillatory": oscillatory_field,
    "holder": holder_field,
}


def make_field(kind: str, d: int = 1, **params) -> DriftField:
    if kind not in BUILTIN:
        raise KeyError(f"unknown field kind {kind!r}; choose from {sorted(BUILTIN)}")
    if kind == "zero":
        return zero_field(d)
    if kind == "constant":
        return constant_field(params.get("c", 0.5), d)
    if kind == "oscillatory":
        return oscillatory_field(params.get("amplitude", 0.5), d)
    return holder_field(params.get("scale", 0.5), params.get("beta", 0.5), d,
                        params.get("direction_seed", 0))


def sample_shell(d: int, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points with |z|_B exactly `radius`, spread over the B-sphere."""
    raw = rng.standard_normal((n, 2 * d))
    raw *= np.exp(rng.uniform(-3, 3, (n, 1)))
    r = b_norm(raw)
    # rescale by the dilation that maps |raw|_B to radius
    lam = radius / r
    return np.concatenate([raw[:, :d] * lam[:, None] ** 3, raw[:, d:] * lam[:, None]], axis=1)


@dataclass(frozen=True)
class GrowthEstimate:
    C_hat: float
    beta_hat: float
    residual: float
    passed: bool


def estimate_growth(field_: DriftField, radii=None, n: int = 200, seed: int = 0, t: float = 0.5) -> GrowthEstimate:
    """Log-log fit of the shell maxima of |F| against |z|_B."""
    if n < 100:
        raise ValueError("need at least 100 samples per shell")
    if radii is None:
        radii = np.geomspace(1.0, 1e3, 12)
    rng = np.random.default_rng(seed)
    maxima, ratio = [], 0.0
    for R in radii:
        z = sample_shell(field_.d, R, n, rng)
        mag = np.linalg.norm(evaluate(field_, t, z), axis=-1)
        maxima.append(mag.max())
        ratio = max(ratio, float(np.max(mag / (1 + b_norm(z) ** field_.beta))))
    # the growth constant is also probed close to the origin
    for R in (1e-3, 0.1, 0.5):
        z = sample_shell(field_.d, R, n, rng)
        mag = np.linalg.norm(evaluate(field_, t, z), axis=-1)
        ratio = max(ratio, float(np.max(mag / (1 + b_norm(z) ** field_.beta))))
    maxima = np.asarray(maxima)
    if np.all(maxima == 0):
        return GrowthEstimate(0.0, 0.0, 0.0, True)
    if np.any(maxima <= 0):
        raise ValueError("degenerate samples: zero drift on some shells")
    slope, icpt = np.polyfit(np.log(radii), np.log(maxima), 1)
    resid = float(np.max(np.abs(np.polyval([slope, icpt], np.log(radii)) - np.log(maxima))))
    passed = slope <= field_.beta + 0.05 and ratio <= field_.growth_C * 1.01
    return GrowthEstimate(ratio, float(slope), resid, bool(passed))


def growth_exponent(field_: DriftField, radii=None, n: int = 200, seed: int = 0) -> float:
    """Tail slope of |F| in |z|_B, using only the largest radii."""
    if radii is None:
        radii = np.geomspace(1e2, 1e3, 6)
    return estimate_growth(field_, radii, n, seed).beta_hat


@dataclass(frozen=True)
class HolderEstimate:
    L_hat: float
    alpha: float
    pairs_used: int


def estimate_local_holder(field_: DriftField, compact_radius: float, t_grid=(0.0, 0.5, 1.0),
                          pair_count: int = 2000, alpha: Optional[float] = None, seed: int = 0) -> HolderEstimate:
    """Largest |F(t,z1) - F(t,z2)| / |z1 - z2|_B^alpha over random pairs in the B-ball."""
    if pair_count < 100:
        raise ValueError("need at least 100 pairs")
    alpha = field_.alpha if alpha is None else alpha
    rng = np.random.default_rng(seed)
    d = field_.d
    best, used = 0.0, 0
    for t in t_grid:
        radii = compact_radius * rng.uniform(0, 1, pair_count)
        z1 = np.stack([sample_shell(d, r, 1, rng)[0] if r > 0 else np.zeros(2 * d) for r in radii])
        step = 10.0 ** rng.uniform(-4, 0, (pair_count, 1)) * rng.standard_normal((pair_count, 2 * d))
        z2 = z1 + step
        inside = b_norm(z2) <= compact_radius
        dist = b_norm(z2 - z1)
        keep = inside & (dist > 0)
        if not np.any(keep):
            continue
        diff = np.linalg.norm(evaluate(field_, t, z1[keep]) - evaluate(field_, t, z2[keep]), axis=-1)
        best = max(best, float(np.max(diff / dist[keep] ** alpha)))
        used += int(keep.sum())
    if used == 0:
        raise ValueError("all sampled pairs coincide or leave the compact")
    return HolderEstimate(best, alpha, used)
