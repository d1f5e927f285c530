"""Backend selection for the gradient-descent kernels.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``ENSEMBLE_SAMPLING_PURE_PYTHON`` is set to a non-empty
value other than ``0``, the NumPy implementations are used. ``BACKEND`` names
the active choice.
"""
import os

from . import _pykernels
from ._pykernels import layer_offsets

_force_pure = os.environ.get("ENSEMBLE_SAMPLING_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_pure:
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

glm_gd = _impl.glm_gd
neural_gd = _impl.neural_gd
neural_forward = _impl.neural_forward


def get_backend(name):
    """Kernel module for ``name`` in {"cython", "python"}; raises ImportError if unavailable."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        get_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


__all__ = ["BACKEND", "glm_gd", "neural_gd", "neural_forward", "layer_offsets",
           "get_backend", "available_backends"]
