"""Pure-numpy implementations of the training hot kernels.

These are the reference semantics; the compiled extension in
``_fastkern.pyx`` implements the same contracts with fused loops.
Both backends operate on contiguous float64 arrays.
"""

import numpy as np

BACKEND = "numpy"

# tanh-form GELU constants
_C0 = 0.7978845608028654  # sqrt(2/pi)
_C1 = 0.044715


def gelu(x):
    """Smooth GELU nonlinearity, tanh form."""
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(_C0 * (x + _C1 * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_grad(x):
    """Derivative of :func:`gelu` with respect to its input."""
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(_C0 * (x + _C1 * x * x * x))
    du = _C0 * (1.0 + 3.0 * _C1 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def lincomb(a, x, b, y):
    """Elementwise a*x + b*y for scalar a, b."""
    return a * x + b * y


def mlp3_forward(x, w1, b1, w2, b2, w3, b3):
    """Three-layer perceptron with GELU hidden activations.

    Returns ``(y, cache)``; the cache holds the hidden pre-activations
    and activations needed by :func:`mlp3_backward`.
    """
    a1 = x @ w1 + b1
    h1 = gelu(a1)
    a2 = h1 @ w2 + b2
    h2 = gelu(a2)
    y = h2 @ w3 + b3
    return y, (a1, h1, a2, h2)


def mlp3_backward(gy, x, w1, w2, w3, cache):
    """Backward pass of :func:`mlp3_forward`.

    Returns gradients ``(gx, gw1, gb1, gw2, gb2, gw3, gb3)`` for the
    output cotangent ``gy``.
    """
    a1, h1, a2, h2 = cache
    gw3 = np.multiply(h2[:, None], gy[None, :])
    gb3 = gy.copy()
    gh2 = w3 @ gy
    ga2 = gh2 * gelu_grad(a2)
    gw2 = np.multiply(h1[:, None], ga2[None, :])
    gb2 = ga2
    gh1 = w2 @ ga2
    ga1 = gh1 * gelu_grad(a1)
    gw1 = np.multiply(x[:, None], ga1[None, :])
    gb1 = ga1
    gx = w1 @ ga1
    return gx, gw1, gb1, gw2, gb2, gw3, gb3


def adam_step(p, g, m, v, step, lr, beta1, beta2, eps):
    """One Adam update, in place on (p, m, v). `step` is 1-based.

    Bias corrections are folded into scalar prefactors:
    lr*(m/bc1)/(sqrt(v/bc2)+eps) == lr_t*m/(sqrt(v)+eps_t).
    """
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    lr_t = lr * np.sqrt(bc2) / bc1
    eps_t = eps * np.sqrt(bc2)
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr_t * m / (np.sqrt(v) + eps_t)
