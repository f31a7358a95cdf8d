"""Smooth test functions on R^{2d} with the derivatives the weak and strong checks need."""
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    lap_v: Callable[[np.ndarray], np.ndarray]
    sup: float
    grad_sup: float
    name: str = ""

    def __call__(self, z):
        return self.value(z)

    def scaled(self, a: float) -> "TestFunction":
        return TestFunction(lambda z: a * self.value(z), lambda z: a * self.grad(z),
                            lambda z: a * self.lap_v(z), abs(a) * self.sup, abs(a) * self.grad_sup,
                            f"{a}*{self.name}")


def gaussian_bump(center, width: float = 1.0, height: float = 1.0) -> TestFunction:
    """height * exp(-|z - center|^2 / (2 width^2)); expectations under Gaussians are closed form."""
    c = np.asarray(center, dtype=float)
    d = c.size // 2
    w2 = width**2

    def val(z):
        r = np.asarray(z, dtype=float) - c
        return height * np.exp(-0.5 * np.sum(r * r, axis=-1) / w2)

    def grad(z):
        r = np.asarray(z, dtype=float) - c
        return -(r / w2) * val(z)[..., None]

    def lap_v(z):
        r = np.asarray(z, dtype=float) - c
        rv2 = np.sum(r[..., d:] ** 2, axis=-1)
        return val(z) * (rv2 / w2**2 - d / w2)

    return TestFunction(val, grad, lap_v, abs(height), abs(height) / (width * np.sqrt(np.e)), "gaussian_bump")


def compact_bump(center, radius: float = 2.0, height: float = 1.0) -> TestFunction:
    """height * exp(1 - 1/(1 - |z-c|^2/radius^2)) inside the ball, 0 outside; C-infinity with compact support."""
    c = np.asarray(center, dtype=float)
    d = c.size // 2
    R2 = radius**2

    def _parts(z):
        r = np.asarray(z, dtype=float) - c
        q = np.sum(r * r, axis=-1) / R2
        inside = q < 1
        qi = np.where(inside, q, 0.0)
        e = np.where(inside, height * np.exp(1 - 1 / (1 - qi)), 0.0)
        return r, qi, inside, e

    def val(z):
        return _parts(z)[3]

    def grad(z):
        r, q, inside, e = _parts(z)
        # d/dz exp(1 - 1/(1-q)) = -e * 2 r / (R2 (1-q)^2)
        fac = np.where(inside, -2 * e / (R2 * (1 - q) ** 2), 0.0)
        return fac[..., None] * r

    def lap_v(z):
        r, q, inside, e = _parts(z)
        om = np.where(inside, 1 - q, 1.0)
        a = -2 / (R2 * om**2)                       # g'(q)-type factor
        da = -8 / (R2**2 * om**3)                   # derivative of a along 2 r / R2 direction, per r_i^2
        rv2 = np.sum(r[..., d:] ** 2, axis=-1)
        # Lap_v e = sum_i d/dv_i (a e r_i) = e (d a + rv2 (a^2 + da))
        out = e * (d * a + rv2 * (a * a + da))
        return np.where(inside, out, 0.0)

    # sup of the gradient along a ray, found numerically once
    s = np.linspace(0, 1, 20001)[1:-1]
    prof = height * np.exp(1 - 1 / (1 - s**2)) * 2 * s / (radius * (1 - s**2) ** 2)
    return TestFunction(val, grad, lap_v, abs(height), float(np.max(np.abs(prof))), "compact_bump")


def gaussian_expectation(psi_center, width, height, mean, cov_blocks) -> np.ndarray:
    """E[psi(Y)] for Y ~ N(mean, C) with C given per coordinate as (xx, xv, vv), psi a Gaussian bump."""
    xx, xv, vv = cov_blocks
    mean = np.asarray(mean, dtype=float)
    c = np.asarray(psi_center, dtype=float)
    d = c.size // 2
    w2 = width**2
    r = mean - c
    out = np.full(mean.shape[:-1], float(height))
    for i in range(d):
        a, b, e = xx + w2, xv, vv + w2
        det = a * e - b * b
        rx, rv = r[..., i], r[..., d + i]
        q = (e * rx * rx - 2 * b * rx * rv + a * rv * rv) / det
        out = out * w2 / np.sqrt(det) * np.exp(-0.5 * q)
    return out
