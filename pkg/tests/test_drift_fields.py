import numpy as np
import pytest
from hypothesis import given, strategies as st

from kinetic_parametrix.drift_fields import (
    DriftField, estimate_growth, estimate_local_holder, evaluate, growth_exponent, make_field, sample_shell,
)
from kinetic_parametrix.lie_group import b_norm

coords = st.floats(-1e3, 1e3, allow_nan=False)


def test_builtin_shapes():
    for kind in ("zero", "constant", "oscillatory", "holder"):
        for d in (1, 2):
            f = make_field(kind, d=d)
            out = evaluate(f, 0.3, np.ones((5, 2 * d)))
            assert out.shape == (5, d)


def test_unknown_kind():
    with pytest.raises(KeyError):
        make_field("quadratic")


def test_parameter_validation():
    with pytest.raises(ValueError):
        DriftField("bad", lambda t, z: z[..., :1], 1, growth_C=1.0, beta=1.0)
    with pytest.raises(ValueError):
        DriftField("bad", lambda t, z: z[..., :1], 1, growth_C=1.0, beta=0.6, alpha=0.5)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        evaluate(make_field("zero", d=2), 0.0, np.zeros((3, 2)))


def test_nonfinite_output_raises():
    f = DriftField("blowup", lambda t, z: np.where(z[..., :1] == 0, np.inf, z[..., :1]), 1, growth_C=1.0, beta=0.5)
    with pytest.raises(FloatingPointError):
        evaluate(f, 0.0, np.zeros((1, 2)))


def test_shell_radius():
    z = sample_shell(2, 3.5, 400, np.random.default_rng(1))
    assert np.allclose(b_norm(z), 3.5, rtol=1e-12)


@given(t=st.floats(0, 1), x=coords, v=coords)
def test_holder_growth_envelope(t, x, v):
    f = make_field("holder", scale=0.7, beta=0.4)
    z = np.array([x, v])
    assert np.linalg.norm(evaluate(f, t, z)) <= 0.7 * (1 + b_norm(z) ** 0.4) * (1 + 1e-12)


@given(t=st.floats(0, 1), x=coords, v=coords)
def test_oscillatory_bounded(t, x, v):
    f = make_field("oscillatory", amplitude=0.3)
    assert np.abs(evaluate(f, t, np.array([x, v]))).max() <= 0.3 + 1e-15


def test_growth_fit_holder():
    f = make_field("holder", scale=0.5, beta=0.5)
    est = estimate_growth(f)
    assert est.passed
    assert abs(est.beta_hat - 0.5) < 0.05
    assert abs(growth_exponent(f) - 0.5) < 0.02


def test_growth_of_zero_field():
    assert estimate_growth(make_field("zero")).passed


def test_growth_rejects_small_samples():
    with pytest.raises(ValueError):
        estimate_growth(make_field("holder"), n=10)


def test_growth_detects_superlinear_field():
    f = DriftField("cubic", lambda t, z: z[..., 1:] ** 3, 1, growth_C=1.0, beta=0.5)
    assert not estimate_growth(f).passed


def test_local_holder_within_declared():
    for kind in ("holder", "oscillatory", "constant"):
        f = make_field(kind)
        for R in (1.0, 3.0):
            est = estimate_local_holder(f, R, pair_count=500)
            assert est.L_hat <= f.holder_L(R) * (1 + 1e-9)
            assert est.pairs_used > 0
