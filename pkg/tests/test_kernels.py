"""Backend contract tests: the numpy fallback and the compiled kernels
must agree, and both must be correct against small references."""

import numpy as np
import pytest

from scenefuse import _kernels as K
from scenefuse._kernels import available_backends, get_impl


def impl_pairs():
    names = available_backends()
    return [(get_impl(a), get_impl(b)) for a in names for b in names if a < b]


def make_mlp(rng, din=30, h=16, dout=20):
    return (
        rng.normal(size=din),
        rng.normal(size=(din, h)), rng.normal(size=h),
        rng.normal(size=(h, h)), rng.normal(size=h),
        rng.normal(size=(h, dout)), rng.normal(size=dout),
    )


def test_gelu_reference_values():
    npk = get_impl("numpy")
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    got = npk.gelu(x)
    assert got[2] == 0.0
    assert abs(got[3] - 0.345714) < 1e-5  # 0.5*0.5*(1+tanh(...))
    assert got[4] > 1.9 and got[4] < 2.0
    h = 1e-6
    fd = (npk.gelu(x + h) - npk.gelu(x - h)) / (2 * h)
    assert np.abs(npk.gelu_grad(x) - fd).max() < 1e-8


@pytest.mark.skipif(len(available_backends()) < 2, reason="compiled backend absent")
def test_backends_agree():
    rng = np.random.default_rng(0)
    x, w1, b1, w2, b2, w3, b3 = make_mlp(rng)
    gy = rng.normal(size=20)
    for a, b in impl_pairs():
        ya, ca = a.mlp3_forward(x, w1, b1, w2, b2, w3, b3)
        yb, cb = b.mlp3_forward(x, w1, b1, w2, b2, w3, b3)
        np.testing.assert_allclose(ya, yb, rtol=0, atol=1e-12)
        ga = a.mlp3_backward(gy, x, w1, w2, w3, ca)
        gb = b.mlp3_backward(gy, x, w1, w2, w3, cb)
        for u, v in zip(ga, gb):
            np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(
            a.lincomb(0.3, x, -1.7, x**2), b.lincomb(0.3, x, -1.7, x**2))
        np.testing.assert_allclose(a.gelu(x), b.gelu(x), atol=1e-14)


@pytest.mark.skipif(len(available_backends()) < 2, reason="compiled backend absent")
def test_adam_backends_agree_over_steps():
    rng = np.random.default_rng(1)
    p1 = rng.normal(size=512)
    p2 = p1.copy()
    m1 = np.zeros(512); v1 = np.zeros(512)
    m2 = np.zeros(512); v2 = np.zeros(512)
    a, b = get_impl("numpy"), get_impl("cython")
    for step in range(1, 30):
        g = rng.normal(size=512)
        a.adam_step(p1, g, m1, v1, step, 1e-3, 0.9, 0.999, 1e-8)
        b.adam_step(p2, g, m2, v2, step, 1e-3, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(p1, p2, rtol=0, atol=1e-14)


def test_adam_updates_in_place_and_descends():
    p = np.full(4, 1.0)
    m = np.zeros(4)
    v = np.zeros(4)
    pid = id(p)
    for step in range(1, 50):
        g = 2.0 * p  # gradient of sum(p^2)
        K.adam_step(p, g, m, v, step, 0.05, 0.9, 0.999, 1e-8)
    assert id(p) == pid
    assert np.all(np.abs(p) < 1.0)


def test_lincomb_matches_formula():
    rng = np.random.default_rng(2)
    x = rng.normal(size=17)
    y = rng.normal(size=17)
    np.testing.assert_allclose(K.lincomb(0.25, x, -2.0, y), 0.25 * x - 2.0 * y,
                               rtol=0, atol=0)


def test_mlp_forward_matches_manual_composition():
    rng = np.random.default_rng(3)
    x, w1, b1, w2, b2, w3, b3 = make_mlp(rng)
    npk = get_impl("numpy")
    y, _ = K.mlp3_forward(x, w1, b1, w2, b2, w3, b3)
    ref = npk.gelu(npk.gelu(x @ w1 + b1) @ w2 + b2) @ w3 + b3
    np.testing.assert_allclose(y, ref, atol=1e-12)
