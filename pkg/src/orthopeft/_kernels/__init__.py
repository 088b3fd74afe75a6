"""Row kernels used by the autodiff ops.

The compiled extension is used when it was built; otherwise the numpy
versions are used. ``use_backend`` switches at runtime (tests, benchmarks).
"""
import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = ("gelu_fwd", "gelu_bwd", "layer_norm_fwd", "layer_norm_bwd", "softmax_fwd", "softmax_bwd")
_active = None


def available_backends():
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def active_backend():
    return _active


def use_backend(name):
    """Select ``"compiled"`` or ``"python"`` kernels for all later calls."""
    global _active
    if name == "compiled":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        mod = _ckernels
    elif name == "python":
        mod = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    _active = name


def as_rows(a):
    """View ``a`` as a contiguous (rows, last_extent) array."""
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1] if a.ndim else 1))


use_backend("compiled" if _ckernels is not None else "python")
