"""Parametrix series for a constant drift, where the exact density is known."""
import numpy as np

from kinetic_parametrix import drift_fields as df
from kinetic_parametrix import parametrix as pm

c = 0.3
field = df.constant_field(c)
z, y = np.array([0.0, 0.0]), np.array([0.1, 0.25])
exact = float(pm.constant_drift_density(c, 1.0, 0.0, z, 1.0, y))
print(f"exact density {exact:.6f}")

for N in range(4):
    cfg = pm.ParametrixConfig(N=N, leaf_budget=100_000)
    pv = pm.eval_p(field, cfg, 0.0, z, 1.0, y)
    print(f"N={N}  p_N={pv.value:.6f}  rel err={abs(pv.value - exact) / exact:.2e}  tail bound={pv.tail_bound:.2e}")

# the tail bound comes from the worst-case term estimates and is very loose;
# it only certifies summability, the error column is what matters here

# mass of the truncated kernel against a test function, with per-term split
cfg = pm.ParametrixConfig(N=2)
terms = pm.integrate_p(field, cfg, 0.0, z, 1.0, lambda p: np.cos(p[..., 1]))
print("int p_2 cos(v) dy per term:", np.round(terms, 6).tolist())
