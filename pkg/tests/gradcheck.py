"""Central finite-difference gradient oracle shared by the test modules.

Kept independent of the autodiff engine's backward pass: it only calls the
forward path of whatever function it is handed.
"""

import numpy as np


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f(*arrays) w.r.t. each array."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f(*arrays)
            a[idx] = orig - h
            fm = f(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    """Max elementwise relative error with an absolute floor on the denominator."""
    err = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = max(err, float(np.max(np.abs(a - n) / denom)))
    return err
