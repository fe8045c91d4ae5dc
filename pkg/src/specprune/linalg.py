"""Dense matrix kernels: Cholesky factorization with incremental extension,
triangular solves, and SVD.

All routines work on float64 arrays and are pure functions of their inputs.
LAPACK (via numpy/scipy) does the heavy lifting; the value added here is the
ridge bookkeeping and the bordered-matrix extension used by the greedy
selection loop.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NoConvergence, NotPositiveDefinite, ShapeMismatch

#: Relative ridge applied to near-singular moment matrices: ridge = RIDGE_SCALE * tr(A) / dim.
RIDGE_SCALE = 1e-8


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T == A + ridge * I."""

    dim: int
    lower: np.ndarray
    ridge: float


def default_ridge(a):
    """Ridge for covariance solves, relative to the mean diagonal magnitude."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return RIDGE_SCALE * float(np.trace(a)) / a.shape[0]


def cholesky(a, ridge=0.0):
    """Factor a symmetric positive definite matrix A (+ ridge * I).

    Raises NotPositiveDefinite when a pivot is non-positive even after
    ridging, which signals the caller to raise the ridge.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {a.shape}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and float(np.max(np.abs(a - a.T))) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric within 1e-9")
    ridged = a if ridge == 0.0 else a + ridge * np.eye(a.shape[0])
    try:
        lower = np.linalg.cholesky(ridged)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return CholeskyFactor(dim=a.shape[0], lower=lower, ridge=float(ridge))


def chol_extend(factor, new_col, new_diag):
    """Extend a factor of A + ridge*I to the factor of the bordered matrix
    [[A, c], [c.T, d]] + ridge*I, in O(dim^2).

    The Schur-complement pivot uses the factor's own ridge.
    """
    new_col = np.asarray(new_col, dtype=np.float64).reshape(-1)
    if new_col.shape[0] != factor.dim:
        raise ShapeMismatch(
            f"border column has length {new_col.shape[0]}, factor dim is {factor.dim}"
        )
    if factor.dim:
        l_row = scipy.linalg.solve_triangular(factor.lower, new_col, lower=True)
    else:
        l_row = np.empty(0)
    pivot_sq = float(new_diag) + factor.ridge - float(l_row @ l_row)
    if pivot_sq <= 0.0:
        raise NotPositiveDefinite(f"Schur complement pivot {pivot_sq} <= 0")
    n = factor.dim + 1
    lower = np.zeros((n, n))
    lower[: n - 1, : n - 1] = factor.lower
    lower[n - 1, : n - 1] = l_row
    lower[n - 1, n - 1] = np.sqrt(pivot_sq)
    return CholeskyFactor(dim=n, lower=lower, ridge=factor.ridge)


def chol_solve(factor, b):
    """Solve (A + ridge*I) X = B given the factor of A + ridge*I."""
    b = np.asarray(b, dtype=np.float64)
    rows = b.shape[0] if b.ndim else 0
    if rows != factor.dim:
        raise ShapeMismatch(f"B has {rows} rows, factor dim is {factor.dim}")
    if factor.dim == 0:
        return b.copy()
    return scipy.linalg.cho_solve((factor.lower, True), b)


def svd(m):
    """Thin SVD: M = U @ diag(s) @ V.T with s sorted descending.

    Returns V (not its transpose); both U and V have orthonormal columns.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return u, s, vt.T
