"""Kernel backend selection.

The compiled extension is preferred when it imports cleanly; the numpy
implementation is the fallback. ``SCENEFUSE_BACKEND=numpy|cython`` forces
a choice (forcing ``cython`` on a host without the extension is an error).
"""

import os

from . import _numpy_impl

_forced = os.environ.get("SCENEFUSE_BACKEND", "").strip().lower()

if _forced == "numpy":
    _impl = _numpy_impl
elif _forced == "cython":
    from . import _fastkern as _impl
else:
    try:
        from . import _fastkern as _impl
    except ImportError:
        _impl = _numpy_impl

BACKEND = _impl.BACKEND
gelu = _impl.gelu
gelu_grad = _impl.gelu_grad
lincomb = _impl.lincomb
mlp3_forward = _impl.mlp3_forward
mlp3_backward = _impl.mlp3_backward
adam_step = _impl.adam_step


def available_backends():
    names = ["numpy"]
    try:
        from . import _fastkern  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


def get_impl(name):
    """Return a specific backend module by name (for benchmarks/tests)."""
    if name == "numpy":
        return _numpy_impl
    if name == "cython":
        from . import _fastkern
        return _fastkern
    raise ValueError(f"unknown kernel backend: {name!r}")
