"""Kernel backend selection.

Two interchangeable implementations of the convolution kernels exist:

* ``numba`` (default): @njit-compiled loops, see kernels_numba.py
* ``numpy``: im2col + BLAS matmul, see kernels_numpy.py

The active backend is chosen once at import time from the environment
variable ``CGLDETECT_BACKEND`` (``numba`` or ``numpy``); when unset, numba
is used if it imports, numpy otherwise.  ``benchmarks/bench_kernels.py``
compares the two.

``CGLDETECT_THREADS`` caps the numba threading layer.  The shipped kernels
are single-threaded (fixed reduction order is part of the determinism
contract), so this only affects numba internals.
"""

import os

from . import kernels_numpy

_VALID = ("numba", "numpy")

conv2d_forward = None
conv2d_grad_kernel = None
conv2d_grad_input = None
correlate2d_valid = None
name = None


def select_backend(which):
    """Install the named kernel set ('numba' or 'numpy') module-wide."""
    global conv2d_forward, conv2d_grad_kernel, conv2d_grad_input
    global correlate2d_valid, name
    if which not in _VALID:
        raise ValueError(f"unknown backend {which!r}; expected one of {_VALID}")
    if which == "numba":
        from . import kernels_numba as mod
    else:
        mod = kernels_numpy
    conv2d_forward = mod.conv2d_forward
    conv2d_grad_kernel = mod.conv2d_grad_kernel
    conv2d_grad_input = mod.conv2d_grad_input
    correlate2d_valid = mod.correlate2d_valid
    name = which
    return mod


def _initial_backend():
    requested = os.environ.get("CGLDETECT_BACKEND", "").strip().lower()
    if requested:
        return requested
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


def _apply_thread_env():
    raw = os.environ.get("CGLDETECT_THREADS", "").strip()
    if not raw:
        return
    try:
        import numba
        numba.set_num_threads(max(1, int(raw)))
    except (ImportError, ValueError):
        pass


select_backend(_initial_backend())
_apply_thread_env()
