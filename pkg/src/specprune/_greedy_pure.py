"""NumPy implementation of the greedy-selection residual kernel.

State is the residual second-moment matrix R (Schur complement of the
selected block, with ridge) and the per-row squared norms. Absorbing a
selected index is a rank-one downdate; the candidate gain for index j is
||R[j]||^2 / (R[j,j] + ridge).

This module is the fallback for the compiled extension in _greedy_core and
must match it numerically (same update formulas, float64 throughout).
"""

import numpy as np


def residual_init(sigma):
    """Copy sigma into mutable kernel state: (R, rownorm2)."""
    r = np.array(sigma, dtype=np.float64, order="C")
    rownorm2 = np.einsum("ij,ij->i", r, r)
    return r, rownorm2


def residual_update(r, rownorm2, isel, ridge):
    """Absorb index isel into the selected set; returns the trace gain.

    Updates r and rownorm2 in place: r -= z z^T with
    z = r[isel] / sqrt(r[isel, isel] + ridge), and the row norms follow
    ||r[j] - z_j z||^2 = ||r[j]||^2 - 2 z_j (r[j].z) + z_j^2 ||z||^2.
    """
    pivot = r[isel, isel] + ridge
    if pivot <= 0.0:
        return 0.0
    z = r[isel] / np.sqrt(pivot)
    y = r @ z
    zz = float(z @ z)
    rownorm2 += z * (z * zz - 2.0 * y)
    r -= np.outer(z, z)
    return zz
