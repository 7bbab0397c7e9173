"""Kernel backend selection.

The compiled extension is used when it imports; ``SFO_LAB_PURE_PYTHON=1``
forces the numpy fallback. Both backends agree to ~1e-12 but are not
bit-identical to each other, so determinism holds per backend.
"""
import os

from . import _fallback

ACT_CODES = {"identity": 0, "tanh": 1, "gelu": 2}

_compiled = None
if os.environ.get("SFO_LAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

if _compiled is not None:
    dense_forward = _compiled.dense_forward
    dense_backward = _compiled.dense_backward
    NAME = "cython"
else:
    dense_forward = _fallback.dense_forward
    dense_backward = _fallback.dense_backward
    NAME = "numpy"


def get_kernels(name):
    """Return ``(dense_forward, dense_backward)`` for a named backend."""
    if name == "numpy":
        return _fallback.dense_forward, _fallback.dense_backward
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled.dense_forward, _compiled.dense_backward
    raise ValueError(f"unknown backend {name!r}")


def compiled_available():
    return _compiled is not None
