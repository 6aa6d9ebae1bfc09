"""Dense linear-algebra kernels with explicit numerical contracts.

Everything here is a pure function on float64 copies of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PINV_RTOL = 1e-10
# Cholesky pivots below this fraction of the largest diagonal entry count as zero.
CHOLESKY_PIVOT_RTOL = 1e-12


class NotPositiveDefinite(np.linalg.LinAlgError):
    """The matrix handed to :func:`cholesky` is singular or indefinite."""


class SvdNotConverged(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = self.sigma.size if rank is None else rank
        return (self.U[:, :r] * self.sigma[:r]) @ self.Vt[:r]


def _finite64(a, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what}: non-finite entries")
    return a


def svd(W) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    The first non-negligible entry of every column of ``U`` is made nonnegative
    (the matching row of ``Vt`` flips with it).
    """
    W = _finite64(W, "svd")
    if W.size == 0:
        k = min(W.shape)
        return SvdResult(np.zeros((W.shape[0], k)), np.zeros(k), np.zeros((k, W.shape[1])))
    try:
        U, s, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdNotConverged(str(exc)) from exc
    U = U.copy()
    Vt = Vt.copy()
    col_max = np.abs(U).max(axis=0)
    for j in range(U.shape[1]):
        if col_max[j] == 0.0:
            continue
        idx = np.flatnonzero(np.abs(U[:, j]) > 1e-12 * col_max[j])[0]
        if U[idx, j] < 0:
            U[:, j] *= -1
            Vt[j] *= -1
    return SvdResult(U, np.maximum(s, 0.0), Vt)


def cholesky(S) -> np.ndarray:
    """Lower-triangular ``T`` with ``T @ T.T == S``.

    Raises :class:`NotPositiveDefinite` when a pivot is nonpositive or numerically
    zero, which is what a rank-deficient sample covariance produces.
    """
    S = _finite64(S, "cholesky")
    S = (S + S.T) / 2
    n = S.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        T = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("matrix is not positive definite") from exc
    floor = CHOLESKY_PIVOT_RTOL * np.abs(np.diag(S)).max()
    pivots = np.diag(T) ** 2
    if not np.all(np.isfinite(T)) or np.any(pivots <= floor):
        bad = int(np.argmin(pivots))
        raise NotPositiveDefinite(f"numerically zero pivot at index {bad} ({pivots[bad]:.3e})")
    return T


def pinv(S, rel_tol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric matrix via eigendecomposition."""
    S = _finite64(S, "pinv")
    S = (S + S.T) / 2
    if S.size == 0:
        return np.zeros_like(S)
    w, V = np.linalg.eigh(S)
    cutoff = rel_tol * np.abs(w).max()
    keep = np.abs(w) > cutoff
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def spectral_norm(A) -> float:
    A = _finite64(A, "spectral_norm")
    if A.size == 0:
        return 0.0
    return float(np.linalg.svd(A, compute_uv=False)[0])
