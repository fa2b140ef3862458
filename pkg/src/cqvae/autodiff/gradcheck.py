"""Central finite differences, used to check the reverse-mode rules."""
import numpy as np


def numerical_gradient(f, params, step=1e-5):
    """d f() / d p for each tensor in ``params``, perturbing ``p.data`` in place."""
    grads = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f())
            flat[i] = orig - step
            down = float(f())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-10):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
