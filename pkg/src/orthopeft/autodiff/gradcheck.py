"""Central-difference gradient oracle."""
import numpy as np

from ..errors import NumericError
from .tensor import no_grad


def numeric_grad(f, param, step=1e-6):
    """Central differences of scalar ``f()`` with respect to ``param.data``."""
    data = param.data
    grad = np.zeros(data.shape, dtype=np.float64)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing coordinate {i}")
            gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(f, params, step=1e-6, floor=1e-12):
    """Max relative error between backprop and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``; it must be deterministic. Relative error per coordinate is
    |a - n| / max(floor, |a| + |n|). Raise ``floor`` above the finite-difference
    noise when some coordinates have an exactly zero gradient (an attention key
    bias, for one). Run under 64-bit precision.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise NumericError(f"grad_check needs float64 parameters, got {p.data.dtype}")
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("objective is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        numeric = numeric_grad(f, p, step)
        denom = np.maximum(floor, np.abs(analytic) + np.abs(numeric))
        err = np.abs(analytic - numeric) / denom
        worst = max(worst, float(err.max()))
    return worst
