# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused float64 training kernels (compiled backend).

Same contracts as ``_numpy_impl``; matrix products go through BLAS, the
elementwise glue is fused into single passes to avoid temporaries.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, tanh
from scipy.linalg.cython_blas cimport dgemv, dger

cnp.import_array()

BACKEND = "cython"

cdef double C0 = 0.7978845608028654  # sqrt(2/pi)
cdef double C1 = 0.044715


cdef inline double _gelu(double x) nogil:
    cdef double t = tanh(C0 * (x + C1 * x * x * x))
    return 0.5 * x * (1.0 + t)


cdef inline double _gelu_grad(double x) nogil:
    cdef double t = tanh(C0 * (x + C1 * x * x * x))
    cdef double du = C0 * (1.0 + 3.0 * C1 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu(object x):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        out[i] = _gelu(xf[i])
    return out.reshape(np.shape(x))


def gelu_grad(object x):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        out[i] = _gelu_grad(xf[i])
    return out.reshape(np.shape(x))


def lincomb(double a, object x, double b, object y):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] yf = np.ascontiguousarray(y, dtype=np.float64).ravel()
    if xf.shape[0] != yf.shape[0]:
        raise ValueError("lincomb operands must have equal size")
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        out[i] = a * xf[i] + b * yf[i]
    return out.reshape(np.shape(x))


cdef void _dense_fwd(double[::1] x, double[:, ::1] w, double[::1] b, double[::1] y):
    # y = x @ w + b, with w C-contiguous (d_in, d_out).
    # The C-order buffer viewed as Fortran is w^T (d_out, d_in), so 'N'.
    cdef int m = <int>w.shape[1]      # d_out
    cdef int n = <int>w.shape[0]      # d_in
    cdef int inc = 1
    cdef double one = 1.0
    cdef Py_ssize_t i
    for i in range(m):
        y[i] = b[i]
    dgemv(b"N", &m, &n, &one, &w[0, 0], &m, &x[0], &inc, &one, &y[0], &inc)


cdef void _dense_bwd_x(double[:, ::1] w, double[::1] gy, double[::1] gx):
    # gx = w @ gy  (i.e. gy @ w^T)
    cdef int m = <int>w.shape[1]
    cdef int n = <int>w.shape[0]
    cdef int inc = 1
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemv(b"T", &m, &n, &one, &w[0, 0], &m, &gy[0], &inc, &zero, &gx[0], &inc)


cdef void _dense_bwd_w(double[::1] x, double[::1] gy, double[:, ::1] gw):
    # gw = outer(x, gy), written once into an uninitialized buffer
    cdef Py_ssize_t i, j, n = gw.shape[0], m = gw.shape[1]
    cdef double xi
    for i in range(n):
        xi = x[i]
        for j in range(m):
            gw[i, j] = xi * gy[j]


def mlp3_forward(object x, object w1, object b1, object w2, object b2,
                 object w3, object b3):
    cdef cnp.ndarray[double, ndim=1] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] w1a = np.ascontiguousarray(w1, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] b1a = np.ascontiguousarray(b1, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] w2a = np.ascontiguousarray(w2, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] b2a = np.ascontiguousarray(b2, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] w3a = np.ascontiguousarray(w3, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] b3a = np.ascontiguousarray(b3, dtype=np.float64)

    cdef Py_ssize_t h = w1a.shape[1]
    cdef Py_ssize_t dout = w3a.shape[1]
    cdef cnp.ndarray[double, ndim=1] a1 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] h1 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] a2 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] h2 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] y = np.empty(dout)
    cdef Py_ssize_t i

    _dense_fwd(xa, w1a, b1a, a1)
    for i in range(h):
        h1[i] = _gelu(a1[i])
    _dense_fwd(h1, w2a, b2a, a2)
    for i in range(h):
        h2[i] = _gelu(a2[i])
    _dense_fwd(h2, w3a, b3a, y)
    return y, (a1, h1, a2, h2)


def mlp3_backward(object gy, object x, object w1, object w2, object w3, cache):
    cdef cnp.ndarray[double, ndim=1] gya = np.ascontiguousarray(gy, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] w1a = np.ascontiguousarray(w1, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] w2a = np.ascontiguousarray(w2, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] w3a = np.ascontiguousarray(w3, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] a1 = cache[0]
    cdef cnp.ndarray[double, ndim=1] h1 = cache[1]
    cdef cnp.ndarray[double, ndim=1] a2 = cache[2]
    cdef cnp.ndarray[double, ndim=1] h2 = cache[3]

    cdef Py_ssize_t din = xa.shape[0]
    cdef Py_ssize_t h = a1.shape[0]
    cdef Py_ssize_t dout = gya.shape[0]

    cdef cnp.ndarray[double, ndim=2] gw3 = np.empty((h, dout))
    cdef cnp.ndarray[double, ndim=1] gb3 = gya.copy()
    cdef cnp.ndarray[double, ndim=2] gw2 = np.empty((h, h))
    cdef cnp.ndarray[double, ndim=2] gw1 = np.empty((din, h))
    cdef cnp.ndarray[double, ndim=1] gh2 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] ga2 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] gh1 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] ga1 = np.empty(h)
    cdef cnp.ndarray[double, ndim=1] gx = np.empty(din)
    cdef Py_ssize_t i

    _dense_bwd_w(h2, gya, gw3)
    _dense_bwd_x(w3a, gya, gh2)
    for i in range(h):
        ga2[i] = gh2[i] * _gelu_grad(a2[i])
    _dense_bwd_w(h1, ga2, gw2)
    _dense_bwd_x(w2a, ga2, gh1)
    for i in range(h):
        ga1[i] = gh1[i] * _gelu_grad(a1[i])
    _dense_bwd_w(xa, ga1, gw1)
    _dense_bwd_x(w1a, ga1, gx)
    return gx, gw1, ga1.copy(), gw2, ga2.copy(), gw3, gb3


def adam_step(object p, object g, object m, object v, long step,
              double lr, double beta1, double beta2, double eps):
    cdef cnp.ndarray[double, ndim=1] pf = np.asarray(p, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] gf = np.ascontiguousarray(g, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] mf = np.asarray(m, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] vf = np.asarray(v, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = pf.shape[0]
    cdef double bc1 = 1.0 - beta1**step
    cdef double bc2 = 1.0 - beta2**step
    # lr * (m/bc1) / (sqrt(v/bc2) + eps) == lr_t * m / (sqrt(v) + eps_t)
    cdef double lr_t = lr * sqrt(bc2) / bc1
    cdef double eps_t = eps * sqrt(bc2)
    cdef double one_m_b1 = 1.0 - beta1
    cdef double one_m_b2 = 1.0 - beta2
    cdef double gi
    for i in range(n):
        gi = gf[i]
        mf[i] = beta1 * mf[i] + one_m_b1 * gi
        vf[i] = beta2 * vf[i] + one_m_b2 * gi * gi
        pf[i] -= lr_t * mf[i] / (sqrt(vf[i]) + eps_t)
