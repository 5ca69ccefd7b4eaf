"""Hot image-patch kernels behind the convolution layers.

Two interchangeable backends provide ``im2col``/``col2im``:

* ``numba`` -- parallel @njit gather/scatter loops (default when numba
  imports cleanly),
* ``numpy`` -- stride-trick gather and a k*k slice-add scatter.

Select explicitly with ``DUALNORM_BACKEND=numba|numpy``. Both produce
identical results up to float rounding; ``benchmarks/bench_kernels.py``
compares their speed on typical layer shapes.
"""

import os

from . import _numpy

_requested = os.environ.get("DUALNORM_BACKEND", "").strip().lower()

if _requested not in ("", "numba", "numpy"):
    raise ValueError(
        f"DUALNORM_BACKEND={_requested!r}: expected 'numba' or 'numpy'"
    )

if _requested == "numpy":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = _numpy
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im


def conv_out_hw(h, w, kh, kw, stride, pad):
    """Output spatial size of a correlation with symmetric zero padding."""
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def get_backend(name=None):
    """Return the kernel module for `name` ('numba'/'numpy'), default active one."""
    if name is None or name == BACKEND:
        return _impl
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba

        return _numba
    raise ValueError(f"unknown kernel backend {name!r}")
