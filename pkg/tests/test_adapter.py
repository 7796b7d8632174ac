import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, layernorm_scalar
from ostta.adapter import LayerNormAdapter
from ostta.errors import NonFiniteGradient, ZeroVector


def test_identity_example():
    a = LayerNormAdapter(2, epsilon=1e-300)
    f, cache = a.forward(np.array([1.0, -1.0]))
    np.testing.assert_allclose(cache.h, [1.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(f, [2**-0.5, -(2**-0.5)], atol=1e-12)


def test_constant_input():
    a = LayerNormAdapter(4)
    with pytest.raises(ZeroVector):
        a.forward(np.full(4, 3.0))
    a.beta = np.array([0.0, 3.0, 0.0, 4.0])
    f, cache = a.forward(np.full(4, 3.0))
    np.testing.assert_allclose(cache.h, a.beta)
    np.testing.assert_allclose(f, [0, 0.6, 0, 0.8])


def test_rejects_bad_input():
    a = LayerNormAdapter(3)
    with pytest.raises(ValueError):
        a.forward(np.array([1.0, np.nan, 0.0]))
    with pytest.raises(ValueError):
        a.forward(np.ones(4))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-10, 10)))
def test_unit_output(raw):
    a = LayerNormAdapter(16)
    a.beta = np.linspace(-0.1, 0.1, 16)
    f = a(raw)
    assert abs(np.linalg.norm(f) - 1.0) <= 1e-12


def test_matches_scalar_forward():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = LayerNormAdapter(12)
        a.gamma = 1 + 0.3 * rng.standard_normal(12)
        a.beta = 0.3 * rng.standard_normal(12)
        raw = rng.standard_normal(12)
        np.testing.assert_allclose(a(raw), layernorm_scalar(raw, a.gamma, a.beta, a.epsilon), atol=1e-13)


def test_identity_on_standardised_input():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(32)
    x = (x - x.mean()) / x.std()
    f = LayerNormAdapter(32, epsilon=1e-300)(x)
    np.testing.assert_allclose(f, x / np.linalg.norm(x), atol=1e-12)


def test_backward_zero_and_radial():
    rng = np.random.default_rng(2)
    a = LayerNormAdapter(8)
    f, cache = a.forward(rng.standard_normal(8))
    gg, gb = a.backward(cache, np.zeros(8))
    assert not gg.any() and not gb.any()
    gg, gb = a.backward(cache, 3.0 * f)
    assert np.abs(gb).max() < 1e-14 and np.abs(gg).max() < 1e-14


def test_backward_matches_fd():
    rng = np.random.default_rng(3)
    for trial in range(60):
        d = (8, 64)[trial % 2]
        a = LayerNormAdapter(d)
        a.gamma = 1 + 0.2 * rng.standard_normal(d)
        a.beta = 0.2 * rng.standard_normal(d)
        raw = rng.standard_normal(d)
        w = rng.standard_normal(d)

        def loss(theta):
            b = a.copy()
            b.gamma, b.beta = theta[:d], theta[d:]
            return float(np.sin(b(raw)) @ w)

        f, cache = a.forward(raw)
        gg, gb = a.backward(cache, np.cos(f) * w)
        analytic = np.concatenate([gg, gb])
        numeric = central_difference(loss, np.concatenate([a.gamma, a.beta]))
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) <= 1e-5


def test_sgd_step():
    a = LayerNormAdapter(4)
    a.sgd_step(np.zeros(4), np.zeros(4))
    assert np.array_equal(a.gamma, np.ones(4)) and np.array_equal(a.beta, np.zeros(4))
    a.sgd_step(np.ones(4), np.zeros(4))
    np.testing.assert_allclose(a.gamma, np.full(4, 0.999))
    with pytest.raises(NonFiniteGradient):
        a.sgd_step(np.array([np.inf, 0, 0, 0]), np.zeros(4))
    assert a.refused_steps == 1
    np.testing.assert_allclose(a.gamma, np.full(4, 0.999))


def test_sequential_steps_differ_from_summed_step():
    # two steps with a fresh forward between them are not one step with summed grads
    rng = np.random.default_rng(4)
    raw = rng.standard_normal(6)
    target = np.eye(6)[0]

    def grads(ad):
        f, c = ad.forward(raw)
        return ad.backward(c, -target)

    a = LayerNormAdapter(6, lr=0.5)
    b = a.copy()
    g1 = grads(a)
    a.sgd_step(*g1)
    g2 = grads(a)
    a.sgd_step(*g2)
    b.sgd_step(g1[0] * 2, g1[1] * 2)
    assert not np.allclose(a.beta, b.beta)


def test_export_import():
    rng = np.random.default_rng(5)
    a = LayerNormAdapter(5)
    a.gamma, a.beta = rng.standard_normal(5), rng.standard_normal(5)
    blob = a.export_params()
    assert len(blob) == 80
    assert np.frombuffer(blob, "<f8")[:5].tolist() == a.gamma.tolist()
    b = LayerNormAdapter(5)
    b.import_params(blob)
    assert np.array_equal(b.gamma, a.gamma) and np.array_equal(b.beta, a.beta)
    with pytest.raises(ValueError):
        b.import_params(blob[:-8])
