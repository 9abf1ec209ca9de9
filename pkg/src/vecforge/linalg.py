"""Dense numerical kernels: SVD, Cholesky solves, covariance accumulation.

The heavy lifting is delegated to LAPACK via numpy/scipy; what this module
adds is the contract layer the rest of the toolkit depends on:

* a deterministic sign convention so factorizations are reproducible
  bit-for-bit across runs on identical input bytes,
* strict input validation with the shared error types,
* exactly-symmetric covariance accumulation (lower triangle mirrored).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NonFinite,
    NotPositiveDefinite,
    RankOutOfRange,
)


@dataclass
class SvdFactors:
    """Thin SVD A = U @ diag(S) @ Vt with S sorted non-increasing.

    U is m x k and Vt is k x n with k = min(m, n). Columns of U follow the
    sign convention that their first nonzero entry is non-negative, with the
    matching row of Vt flipped to compensate.
    """

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.S.shape[0]


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or infinity")


def _apply_sign_convention(U: np.ndarray, Vt: np.ndarray) -> None:
    m, k = U.shape
    for j in range(k):
        col = U[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0:
            U[:, j] = -col
            Vt[j, :] = -Vt[j, :]


def svd(A: np.ndarray) -> SvdFactors:
    """Thin SVD with the deterministic sign convention applied."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionMismatch(f"svd expects a matrix, got ndim={A.ndim}")
    _require_finite("svd input", A)
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(f"SVD did not converge: {exc}") from exc
    U = np.ascontiguousarray(U)
    Vt = np.ascontiguousarray(Vt)
    _apply_sign_convention(U, Vt)
    return SvdFactors(U=U, S=S, Vt=Vt)


def truncate(factors: SvdFactors, r: int) -> np.ndarray:
    """Rank-r reconstruction U[:, :r] @ diag(S[:r]) @ Vt[:r, :].

    r = 0 yields the zero matrix. By the Eckart-Young theorem the result is
    a Frobenius-optimal rank-r approximation of the factored matrix.
    """
    k = factors.S.shape[0]
    if not 0 <= r <= k:
        raise RankOutOfRange(f"rank {r} outside [0, {k}]")
    m = factors.U.shape[0]
    n = factors.Vt.shape[1]
    if r == 0:
        return np.zeros((m, n))
    return (factors.U[:, :r] * factors.S[:r]) @ factors.Vt[:r, :]


def cholesky(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionMismatch(f"cholesky expects a square matrix, got {C.shape}")
    _require_finite("cholesky input", C)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix is not positive definite: {exc}") from exc


def cholesky_solve(C: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve C @ X = B for symmetric positive definite C."""
    C = np.asarray(C, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionMismatch(f"cholesky_solve expects square C, got {C.shape}")
    if B.ndim not in (1, 2) or B.shape[0] != C.shape[0]:
        raise DimensionMismatch(f"right-hand side {B.shape} does not match C {C.shape}")
    _require_finite("cholesky_solve C", C)
    _require_finite("cholesky_solve B", B)
    try:
        factor = scipy.linalg.cho_factor(C, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, B, check_finite=False)


def accumulate_covariance(acc: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Return acc + X @ X.T with exact output symmetry.

    The Gram update is computed once on the lower triangle and mirrored, so
    if ``acc`` is exactly symmetric the result is too, regardless of BLAS
    rounding asymmetries.
    """
    acc = np.asarray(acc, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise DimensionMismatch(f"accumulator must be square, got {acc.shape}")
    if X.ndim != 2:
        raise DimensionMismatch(f"batch must be 2-D, got ndim={X.ndim}")
    if X.shape[0] != acc.shape[0]:
        raise DimensionMismatch(
            f"batch rows {X.shape[0]} do not match accumulator dim {acc.shape[0]}"
        )
    if X.shape[1] < 1:
        raise DimensionMismatch("batch must contain at least one column")
    _require_finite("covariance batch", X)
    gram = X @ X.T
    lower = np.tril(gram)
    sym = lower + np.tril(gram, -1).T
    return acc + sym
