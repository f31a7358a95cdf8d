"""Wasserstein-1 estimates between sample clouds and narrow-convergence checks for kernels."""
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .gaussian_kernel import stream


@dataclass(frozen=True)
class W1Estimate:
    value: float
    method: str
    se: Optional[float] = None
    directions: int = 0

    def __post_init__(self):
        if self.method not in ("exact-1D", "sliced", "lower-bound-projection"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.value < 0:
            raise ValueError("W1 is nonnegative")


def _match_sizes(a: np.ndarray, b: np.ndarray, seed: int = 0):
    """Resample the larger cloud down to the smaller size (deterministic)."""
    if len(a) == len(b):
        return a, b
    rng = stream(seed, 7)
    if len(a) > len(b):
        return a[np.sort(rng.choice(len(a), len(b), replace=False))], b
    return a, b[np.sort(rng.choice(len(b), len(a), replace=False))]


def w1_1d(samples_a, samples_b, seed: int = 0) -> float:
    """Mean absolute difference of sorted samples."""
    a = np.ravel(np.asarray(samples_a, dtype=float))
    b = np.ravel(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    a, b = _match_sizes(a, b, seed)
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def random_directions(dim: int, k: int, seed: int = 0) -> np.ndarray:
    u = stream(seed, 11).standard_normal((k, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def w1_sliced(samples_a, samples_b, k: int = 64, seed: int = 0) -> W1Estimate:
    """Average of 1-D W1 over k random unit directions."""
    if k < 1:
        raise ValueError("need at least one direction")
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("clouds live in different dimensions")
    u = random_directions(a.shape[-1], k, seed)
    vals = np.array([w1_1d(a @ ui, b @ ui, seed) for ui in u])
    se = float(vals.std(ddof=1) / np.sqrt(k)) if k > 1 else None
    return W1Estimate(float(vals.mean()), "sliced", se, k)


def w1_projection_bound(samples_a, samples_b) -> W1Estimate:
    """max over coordinate axes of 1-D W1; a lower bound for the full W1."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    return W1Estimate(max(w1_1d(a[:, i], b[:, i]) for i in range(a.shape[-1])), "lower-bound-projection")


def flow_continuity_modulus(flow, k: int = 32, seed: int = 0) -> float:
    """max over adjacent stored times of sliced W1(mu_i, mu_i+1) / sqrt(gap)."""
    times = np.asarray(flow.times)
    if len(times) < 2:
        raise ValueError("need at least two times")
    live = flow.weights[0] > 0
    out = 0.0
    for i in range(len(times) - 1):
        w = w1_sliced(flow.samples[i][live], flow.samples[i + 1][live], k, seed).value
        out = max(out, w / np.sqrt(times[i + 1] - times[i]))
    return float(out)


@dataclass
class NarrowDeltaReport:
    gaps: list
    errors: dict
    decreasing: dict
    final_below: dict
    tolerance: float
    passed: bool


def narrow_delta_check(integrate: Callable[[float, np.ndarray, float, Callable], float], y, t: float,
                       tests: dict, gaps: Sequence[float] = tuple(0.4 / 2**k for k in range(9)),
                       tolerance: float = 1e-2) -> NarrowDeltaReport:
    """|int p(s,y;t,eta) g(eta) d eta - g(y)| for s = t - gap as the gap shrinks.

    `integrate(s, z, t, g)` returns the kernel integral; `tests` maps names to
    bounded continuous functions g.
    """
    y = np.asarray(y, dtype=float)
    errs, dec, fin = {}, {}, {}
    for name, g in tests.items():
        target = float(np.asarray(g(y[None]))[0])
        row = [abs(float(integrate(t - gap, y, t, g)) - target) for gap in gaps]
        errs[name] = row
        dec[name] = bool(all(b <= a + 1e-12 for a, b in zip(row, row[1:])))
        fin[name] = row[-1] < tolerance
    return NarrowDeltaReport(list(gaps), errs, dec, fin, tolerance, all(dec.values()) and all(fin.values()))


def parametrix_integrator(field_, config):
    """Adapter turning integrate_p into the callable narrow_delta_check expects."""
    from .parametrix import integrate_p

    def integrate(s, z, t, g):
        return float(integrate_p(field_, config, s, z, t, g).sum())
    return integrate
