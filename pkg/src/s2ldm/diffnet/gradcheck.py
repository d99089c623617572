"""Central finite-difference gradient checking."""
import numpy as np


def grad_check(f, x, h=1e-4):
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` must return ``(value, grad)`` with a scalar value and ``grad``
    shaped like ``x``. Relative error per coordinate is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise FloatingPointError("non-finite evaluation at the base point")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x.copy())[0]
        flat[i] = orig - h
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
