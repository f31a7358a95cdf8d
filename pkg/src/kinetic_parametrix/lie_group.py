"""Kinetic Lie group on R^{1+2d}.

Points are stored as float arrays whose last axis is (t, x_1..x_d, v_1..v_d),
so every function below is vectorised over leading axes. Phase points drop
the time slot and have last axis (x, v) of length 2d.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

ScalarField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SpaceTimePoint:
    t: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if x.shape != v.shape or x.ndim != 1:
            raise ValueError("x and v must be 1-D vectors of equal length")
        if not (np.isfinite(self.t) and np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    def __eq__(self, other):
        return isinstance(other, SpaceTimePoint) and np.array_equal(self.as_array(), other.as_array())

    def __hash__(self):
        return hash(self.as_array().tobytes())

    @property
    def d(self) -> int:
        return self.x.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([[float(self.t)], self.x, self.v])

    @classmethod
    def from_array(cls, a) -> "SpaceTimePoint":
        a = np.asarray(a, dtype=float)
        d = dim_of_spacetime(a)
        return cls(float(a[0]), a[1:1 + d], a[1 + d:])


@dataclass(frozen=True)
class GroupConstants:
    homogeneous_dimension: int
    quasi_triangle_k: float


def dim_of_spacetime(a: np.ndarray) -> int:
    n = np.shape(a)[-1]
    if n < 3 or (n - 1) % 2:
        raise ValueError(f"last axis must have length 1+2d, got {n}")
    return (n - 1) // 2


def dim_of_phase(z: np.ndarray) -> int:
    n = np.shape(z)[-1]
    if n < 2 or n % 2:
        raise ValueError(f"last axis must have length 2d, got {n}")
    return n // 2


def _split(a):
    a = np.asarray(a, dtype=float)
    d = dim_of_spacetime(a)
    return a[..., :1], a[..., 1:1 + d], a[..., 1 + d:]


def _check_same_dim(a, b):
    if np.shape(a)[-1] != np.shape(b)[-1]:
        raise ValueError("dimension mismatch between points")


def _join(*parts) -> np.ndarray:
    """Concatenate on the last axis after broadcasting only the leading axes."""
    lead = np.broadcast_shapes(*(np.shape(q)[:-1] for q in parts))
    return np.concatenate([np.broadcast_to(q, lead + np.shape(q)[-1:]) for q in parts], axis=-1)


def compose(a, b) -> np.ndarray:
    """Group law a o b = (t_a + t_b, x_a + x_b + t_b v_a, v_a + v_b)."""
    _check_same_dim(a, b)
    ta, xa, va = _split(a)
    tb, xb, vb = _split(b)
    return _join(ta + tb, xa + xb + tb * va, va + vb)


def inverse(a) -> np.ndarray:
    t, x, v = _split(a)
    return np.concatenate([-t, -x + t * v, -v], axis=-1)


def identity(d: int) -> np.ndarray:
    return np.zeros(1 + 2 * d)


def dilate(r, a) -> np.ndarray:
    """Anisotropic dilation (r^2 t, r^3 x, r v); r may be an array broadcasting against a[..., :1]."""
    r = np.asarray(r, dtype=float)
    if not np.all(r > 0):
        raise ValueError("dilation factor must be positive")
    t, x, v = _split(a)
    return np.concatenate([r**2 * t, r**3 * x, r * v], axis=-1)


def dilate_phase(r: float, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    return np.concatenate([r**3 * z[..., :d], r * z[..., d:]], axis=-1)


def shift(tau, z) -> np.ndarray:
    """Drift flow e^{tau B} z = (x + tau v, v)."""
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    tau = np.asarray(tau, dtype=float)[..., None]
    x, v = z[..., :d], z[..., d:]
    return _join(x + tau * v, v)


def b_norm(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    d = dim_of_phase(z)
    return np.sum(np.cbrt(np.abs(z[..., :d])), axis=-1) + np.sum(np.abs(z[..., d:]), axis=-1)


def homogeneous_norm(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return np.sqrt(np.abs(a[..., 0])) + b_norm(a[..., 1:])


def quasi_distance(a, b) -> np.ndarray:
    """d(a, b) = |b^{-1} o a|_K, left invariant and 1-homogeneous."""
    _check_same_dim(a, b)
    return homogeneous_norm(compose(inverse(b), a))


def homogeneous_dimension(d: int) -> int:
    return 2 + 4 * d


def measure_quasi_triangle(d: int = 1, n: int = 10_000, seed: int = 0, scale: float = 2.0) -> float:
    """Largest observed d(a,c) / (d(a,b) + d(b,c)) and d(a,b)/d(b,a) over random triples.

    This is a lower estimate of the structural constant, nothing more.
    """
    rng = np.random.default_rng(seed)
    a, b, c = (scale * rng.standard_normal((n, 1 + 2 * d)) for _ in range(3))
    dac = quasi_distance(a, c)
    dab = quasi_distance(a, b)
    dbc = quasi_distance(b, c)
    dba = quasi_distance(b, a)
    tri = np.max(dac / (dab + dbc))
    sym = np.max(dab / dba)
    return float(max(tri, sym))


def group_constants(d: int = 1, n: int = 10_000, seed: int = 0) -> GroupConstants:
    return GroupConstants(homogeneous_dimension(d), measure_quasi_triangle(d, n, seed))


def lie_derivative_fd(f: ScalarField, p, h: float = 1e-4) -> np.ndarray:
    """Central difference of f along the integral curve of Y through p."""
    if h == 0:
        raise ValueError("step must be nonzero")
    t, x, v = _split(p)
    fwd = _join(t + h, x + h * v, v)
    bwd = _join(t - h, x - h * v, v)
    fp, fm = np.asarray(f(fwd), dtype=float), np.asarray(f(bwd), dtype=float)
    if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
        raise ValueError("field returned non-finite values")
    return (fp - fm) / (2 * h)


def holder_seminorm_estimate(f: ScalarField, z1, z2, alpha: float) -> float:
    """max |f(z2) - f(z1)| / |z2 - z1|_B^alpha over paired phase samples.

    Any finite sample gives a lower bound for the true seminorm.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    z1, z2 = np.atleast_2d(z1), np.atleast_2d(z2)
    dist = b_norm(z2 - z1)
    if np.any(dist == 0):
        raise ValueError("coincident sample pair")
    return float(np.max(np.abs(f(z2) - f(z1)) / dist**alpha))


def random_pairs(d: int, n: int, seed: int = 0, spread: float = 1.0, radius: float = 3.0):
    """Random phase-point pairs inside a box, at separations spanning several decades."""
    rng = np.random.default_rng(seed)
    z1 = rng.uniform(-radius, radius, (n, 2 * d))
    sep = spread * 10.0 ** rng.uniform(-4, 0, (n, 1)) * rng.standard_normal((n, 2 * d))
    return z1, z1 + sep
