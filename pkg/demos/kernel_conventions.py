"""Kinetic Gaussian kernel: why the generator scaling is the default.

Prints the two covariance scalings at lam = t = 1, then compares each against
the empirical covariance of the driftless SDE dX = V dt, dV = sqrt(2) dW.
"""
import numpy as np

from kinetic_parametrix import gaussian_kernel as gk

GEN, HALF = gk.CovarianceConvention.GENERATOR, gk.CovarianceConvention.PAPER

for conv in (GEN, HALF):
    print(conv.value, np.round(gk.covariance(1.0, 1.0, conv).matrix(), 4).tolist())

# Euler on a fine grid; the x update is exact enough at dt = 1e-3
rng = np.random.default_rng(1)
n, dt = 200_000, 1e-3
x, v = np.zeros(n), np.zeros(n)
for _ in range(1000):
    x += v * dt
    v += np.sqrt(2 * dt) * rng.standard_normal(n)
emp = np.cov(np.stack([x, v]))
print("empirical", np.round(emp, 3).tolist())

z, y = np.array([0.2, -0.1]), np.array([[0.5, 0.3]])
for conv in (GEN, HALF):
    rep = gk.kernel_pde_residual(1.0, 1.0, y, np.linspace(0.2, 0.8, 4), z[None], conv)
    print(conv.value, f"residual {rep.max_rel_residual:.2e}, halved operator {rep.max_rel_residual_half:.2e}")
    print("  ", rep.message)
