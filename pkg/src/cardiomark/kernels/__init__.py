"""Hot numeric kernels with two interchangeable backends.

The 3x3 convolution forward/backward and the 2x2 max-pool are where nearly
all training and inference time goes.  Both are implemented twice:

* ``numba_kernels`` -- parallel ``@njit`` loops (default when numba imports)
* ``numpy_kernels`` -- pure-numpy fallback (im2col + BLAS)

Select with the environment variable ``CARDIOMARK_KERNELS=numba|numpy`` or at
runtime with :func:`use_backend`.  ``benchmarks/bench_kernels.py`` compares
the two.

Both backends are deterministic for a fixed thread count: every output
element is an independent fixed-order sum, so no cross-thread accumulation
occurs.
"""

import os

from . import numpy_kernels

_impl = numpy_kernels
_name = "numpy"


def _numba_module():
    from . import numba_kernels

    return numba_kernels


def use_backend(name):
    """Bind the kernel backend. Returns the active backend name."""
    global _impl, _name
    if name == "numpy":
        _impl, _name = numpy_kernels, "numpy"
    elif name == "numba":
        _impl, _name = _numba_module(), "numba"
    else:
        raise ValueError(f"unknown kernel backend {name!r} (use 'numpy' or 'numba')")
    return _name


def backend():
    """Name of the active backend ('numpy' or 'numba')."""
    return _name


def conv3x3_forward(x, w, b):
    return _impl.conv3x3_forward(x, w, b)


def conv3x3_backward(x, w, gy, need_input_grad=True):
    return _impl.conv3x3_backward(x, w, gy, need_input_grad=need_input_grad)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(x)


def maxpool2_backward(sel, gy):
    return _impl.maxpool2_backward(sel, gy)


_env = os.environ.get("CARDIOMARK_KERNELS", "").strip().lower()
if _env in ("numpy", "numba"):
    use_backend(_env)
else:
    try:
        use_backend("numba")
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        use_backend("numpy")
