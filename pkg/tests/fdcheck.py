"""Central finite-difference gradient oracle for the test suite.

Kept independent of the library's analytic backward passes: it only calls
forward functions through a scalar-valued closure and perturbs raw arrays.
"""

import numpy as np


def central_difference(f, arrays, h=1e-5):
    """Numeric gradient of the scalar f() w.r.t. each array, by central
    differences. Arrays are perturbed in place and restored."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|): relative for large, absolute for tiny."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    num = np.abs(analytic - numeric).max() if analytic.size else 0.0
    den = max(1.0, np.abs(analytic).max(), np.abs(numeric).max()) if analytic.size else 1.0
    return num / den
