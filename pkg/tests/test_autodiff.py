"""Gradient correctness of the tape ops against central finite differences."""

import numpy as np
import pytest

from scenefuse import autodiff as ad


def fd_check(fn, args, wrt, h=1e-6, tol=1e-6):
    """Norm-relative agreement between tape gradients and central FD."""
    vars_ = [ad.Var(a.copy()) for a in args]
    out = fn(*vars_)
    ad.backward(out)
    for i in wrt:
        g = vars_[i].grad
        assert g is not None, f"no gradient for arg {i}"
        fd = np.zeros_like(args[i])
        it = np.nditer(args[i], flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            pert = [a.copy() for a in args]
            pert[i][idx] += h
            fp = float(ad.value_of(fn(*[ad.Var(p) for p in pert])))
            pert[i][idx] -= 2 * h
            fm = float(ad.value_of(fn(*[ad.Var(p) for p in pert])))
            fd[idx] = (fp - fm) / (2 * h)
            it.iternext()
        num = np.linalg.norm(g - fd)
        den = max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-8)
        assert num / den < tol, f"arg {i}: rel err {num / den}"


def test_elementwise_ops():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 2.0
    fd_check(lambda x, y: ad.vsum(ad.mul(ad.add(x, y), ad.sub(x, y))), [a, b], [0, 1])
    fd_check(lambda x, y: ad.vsum(ad.div(x, y)), [a, b], [0, 1])
    fd_check(lambda x: ad.vsum(ad.exp(ad.mul(x, 0.3))), [a], [0])
    fd_check(lambda x: ad.vsum(ad.tanh(x)), [a], [0])
    fd_check(lambda x: ad.vsum(ad.sqrt(ad.add(ad.square(x), 0.5))), [a], [0])


def test_broadcasting_unbroadcast():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(3,))
    c = rng.normal(size=(5, 1))
    fd_check(lambda x, y: ad.vsum(ad.mul(x, y)), [a, b], [0, 1])
    fd_check(lambda x, y: ad.vsum(ad.div(x, ad.add(ad.square(y), 1.0))), [a, c], [0, 1])
    s = rng.normal(size=())
    fd_check(lambda x, y: ad.vsum(ad.mul(x, y)), [a, s], [0, 1])


def test_matmul_ops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=6)
    w = rng.normal(size=(6, 4))
    m = rng.normal(size=(4, 6))
    fd_check(lambda a, b: ad.vsum(ad.square(ad.vecmat(a, b))), [x, w], [0, 1])
    fd_check(lambda a, b: ad.vsum(ad.square(ad.matvec(a, b))), [m, x], [0, 1])
    fd_check(lambda a, b: ad.dot(a, ad.matvec(m, b)), [rng.normal(size=4), x], [0, 1])


def test_reductions_and_shapes():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 6, 3))
    fd_check(lambda x: ad.vsum(ad.square(ad.vmean(x, axis=(0, 2)))), [a], [0])
    fd_check(lambda x: ad.vsum(ad.square(ad.reshape(x, (6, 6)))), [a], [0])
    fd_check(lambda x: ad.vsum(ad.square(x[1:, 2:5, :2])), [a], [0])
    fd_check(lambda x: ad.vmean(x, axis=1, keepdims=True)[0, 0, 1], [a], [0])


def test_concat_and_gather():
    rng = np.random.default_rng(4)
    a = rng.normal(size=4)
    b = rng.normal(size=3)
    fd_check(lambda x, y: ad.vsum(ad.square(ad.concat([x, y]))), [a, b], [0, 1])
    table = rng.normal(size=(5, 3))
    ids = [0, 2, 2, 4]
    fd_check(lambda t: ad.vsum(ad.square(ad.gather_rows(t, ids))), [table], [0])


def test_clamp_subgradient():
    a = np.array([-0.5, 0.2, 0.8, 1.5])
    v = ad.Var(a)
    out = ad.vsum(ad.mul(ad.clamp(v, 0.0, 1.0), np.array([1.0, 2.0, 3.0, 4.0])))
    ad.backward(out)
    np.testing.assert_array_equal(v.grad, [0.0, 2.0, 3.0, 0.0])


def test_cosine_properties_and_grad():
    rng = np.random.default_rng(5)
    a = rng.normal(size=7)
    b = rng.normal(size=7)
    fd_check(lambda x, y: ad.cosine(x, y), [a, b], [0, 1], tol=1e-5)
    assert float(ad.cosine(a, a)) == pytest.approx(1.0, abs=1e-9)
    assert float(ad.cosine(a, 3.5 * a)) == pytest.approx(1.0, abs=1e-9)


def test_mlp3_node_gradients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=10)
    w1 = rng.normal(size=(10, 6)); b1 = rng.normal(size=6)
    w2 = rng.normal(size=(6, 6)); b2 = rng.normal(size=6)
    w3 = rng.normal(size=(6, 5)); b3 = rng.normal(size=5)
    target = rng.normal(size=5)

    def loss(*args):
        return ad.vmean(ad.square(ad.sub(ad.mlp3(*args), target)))

    fd_check(loss, [x, w1, b1, w2, b2, w3, b3], list(range(7)), tol=1e-5)


def test_diamond_graph_accumulates():
    v = ad.Var(np.array(2.0))
    y = ad.add(ad.mul(v, v), ad.mul(v, 3.0))  # x^2 + 3x -> grad 2x+3 = 7
    ad.backward(y)
    assert float(v.grad) == pytest.approx(7.0)


def test_shared_subgraph_reused_twice():
    v = ad.Var(np.array([1.0, 2.0]))
    s = ad.vsum(ad.square(v))  # 5
    y = ad.mul(s, s)  # 25, dy/dv = 2*s*2v = 20v
    ad.backward(y)
    np.testing.assert_allclose(v.grad, [20.0, 40.0])


def test_backward_requires_scalar_root():
    v = ad.Var(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(v, 2.0))


def test_non_var_passthrough():
    out = ad.add(np.ones(3), np.ones(3))
    assert isinstance(out, np.ndarray)
    out = ad.mlp3(np.ones(4), np.zeros((4, 3)), np.zeros(3),
                  np.zeros((3, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2))
    assert isinstance(out, np.ndarray)
