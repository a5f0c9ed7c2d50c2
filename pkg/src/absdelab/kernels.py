"""Kernel backend selection.

The compiled module is used when it imports; set ``ABSDELAB_PURE_PYTHON=1`` to
force the numpy fallback. Both backends expose ``poly_gram``, ``poly_rhs``,
``poly_eval`` and ``suffix_max_abs`` with identical semantics; results agree to
round-off, not bit-for-bit.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ABSDELAB_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def poly_gram(z, degree):
    return _impl.poly_gram(_c(z), int(degree))


def poly_rhs(z, targets, degree):
    return _impl.poly_rhs(_c(z), _c(targets), int(degree))


def poly_eval(z, coef):
    return _impl.poly_eval(_c(z), _c(coef))


def suffix_max_abs(y):
    return _impl.suffix_max_abs(_c(y))


def use_backend(name):
    """Switch backend at runtime ('cython' or 'python'); used by the benchmark and tests."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _pykernels, "python"
    elif name == "cython":
        from . import _ckernels

        _impl, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return BACKEND
