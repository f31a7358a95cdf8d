import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from kinetic_parametrix import measure_tools as mt
from kinetic_parametrix import parametrix as pm
from kinetic_parametrix.drift_fields import make_field
from kinetic_parametrix.langevin_sim import EmpiricalFlow
from kinetic_parametrix.test_functions import gaussian_bump

clouds = arrays(np.float64, 12, elements=st.floats(-100, 100))


def test_w1_1d_examples():
    assert mt.w1_1d([0, 0], [1, 1]) == 1.0
    a = np.random.default_rng(0).normal(size=500)
    assert mt.w1_1d(a, a) == 0.0
    assert mt.w1_1d(a, a + 1.5) == pytest.approx(1.5, rel=1e-14)
    with pytest.raises(ValueError):
        mt.w1_1d([], [1.0])


def test_w1_1d_gaussian_translation():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=50_000), rng.normal(0.7, 1.0, 50_000)
    # the order-statistics estimator fluctuates on the 1/sqrt(n) scale
    assert abs(mt.w1_1d(a, b) - 0.7) < 4 * np.sqrt(2 / 50_000) + 0.01


def test_w1_1d_resamples_unequal_sizes():
    a = np.arange(10.0)
    assert mt.w1_1d(a, np.arange(1000.0) / 100, seed=2) >= 0


@given(a=clouds, b=clouds, c=clouds)
def test_w1_1d_metric_axioms(a, b, c):
    ab, ba = mt.w1_1d(a, b), mt.w1_1d(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert mt.w1_1d(a, a) == 0.0
    assert ab <= mt.w1_1d(a, c) + mt.w1_1d(c, b) + 1e-9


@given(z1=arrays(np.float64, 2, elements=st.floats(-10, 10)), z2=arrays(np.float64, 2, elements=st.floats(-10, 10)))
def test_sliced_point_masses_below_distance(z1, z2):
    est = mt.w1_sliced(z1[None], z2[None], k=16)
    assert est.value <= np.linalg.norm(z1 - z2) * (1 + 1e-12) + 1e-12


def test_sliced_point_masses_mean_cosine():
    # average |u . (1, 0)| over the sampled directions; its k -> infinity limit is 2 / pi
    est = mt.w1_sliced(np.zeros((1, 2)), np.array([[1.0, 0.0]]), k=4000, seed=3)
    u = mt.random_directions(2, 4000, 3)
    assert est.value == pytest.approx(np.mean(np.abs(u[:, 0])), rel=1e-12)
    assert abs(est.value - 2 / np.pi) < 4 * est.se


def test_sliced_homogeneous_and_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(300, 2)), rng.normal(1.0, 2.0, (300, 2))
    base = mt.w1_sliced(a, b, k=32, seed=9)
    assert mt.w1_sliced(3 * a, 3 * b, k=32, seed=9).value == pytest.approx(3 * base.value, rel=1e-12)
    assert mt.w1_sliced(a, b, k=32, seed=9) == base
    assert mt.w1_sliced(a, a, k=8).value == 0.0


def test_projection_bound_method_and_dimension_check():
    a, b = np.zeros((4, 2)), np.ones((4, 2))
    assert mt.w1_projection_bound(a, b).method == "lower-bound-projection"
    with pytest.raises(ValueError):
        mt.w1_sliced(a, np.ones((4, 3)))
    with pytest.raises(ValueError):
        mt.W1Estimate(-1.0, "sliced")


def test_continuity_modulus():
    rng = np.random.default_rng(6)
    still = np.repeat(rng.normal(size=(1, 200, 2)), 3, axis=0)
    w = np.full((3, 200), 1 / 200)
    assert mt.flow_continuity_modulus(EmpiricalFlow(np.array([0, 0.5, 1.0]), still, w)) == 0.0
    moving = still + np.array([0.0, 0.5, 1.0])[:, None, None] * np.array([1.0, 0.0])
    mod = mt.flow_continuity_modulus(EmpiricalFlow(np.array([0, 0.5, 1.0]), moving, w))
    assert 0 < mod < 0.5 / np.sqrt(0.5) + 1e-12


def test_narrow_delta_driftless():
    cfg = pm.ParametrixConfig(N=3, time_order=12, space_order=16, leaf_budget=100_000)
    tests = {"bump": gaussian_bump([0.2, 0.1], 0.5), "one": lambda y: np.ones(y.shape[:-1]),
             "cos": lambda y: np.cos(y[..., 0] + y[..., 1])}
    rep = mt.narrow_delta_check(mt.parametrix_integrator(make_field("zero"), cfg), [0.2, 0.1], 1.0, tests)
    assert rep.passed
    assert max(rep.errors["one"]) < 1e-12
    # Lipschitz g: error at most O(sqrt(gap))
    assert all(e <= 2 * np.sqrt(g) for e, g in zip(rep.errors["cos"], rep.gaps))
