"""Low-rank factorization of single layers and whole models.

Three solvers produce ``W ~= A @ B``:

* ``svd``      -- truncated SVD with the singular values split evenly between factors;
* ``whitened`` -- closed-form optimum of ||W X - A B X||_F via the Cholesky factor
                  of the calibration covariance (fails on singular covariances);
* ``als``      -- alternating least squares on the same activation-aware
                  objective, started from the SVD factors. Works with any PSD covariance.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import linalg
from .allocate import RankAllocation
from .tensorio import Covariance, WeightTensor

METHODS = ("svd", "whitened", "als")
DEFAULT_TAU = 10
EARLY_STOP_RTOL = 1e-9


class FactorizationError(RuntimeError):
    pass


@dataclass
class LowRankFactors:
    layer_name: str
    A: np.ndarray
    B: np.ndarray
    method: str
    iterations_run: int = 0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def product(self) -> np.ndarray:
        return self.A @ self.B


@dataclass
class ObjectiveTrace:
    values: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.values[0]

    @property
    def final(self) -> float:
        return self.values[-1]


def _as_cov_matrix(Mcov) -> np.ndarray:
    m = Mcov.matrix if isinstance(Mcov, Covariance) else Mcov
    m = np.asarray(m, dtype=np.float64)
    return (m + m.T) / 2


def _check_rank(W: np.ndarray, r: int) -> None:
    if not 0 <= r <= min(W.shape):
        raise ValueError(f"rank {r} outside [0, {min(W.shape)}]")


def objective(W, A, B, Mcov) -> float:
    """tr((W - AB) M (W - AB)^T), i.e. ||W X - A B X||_F^2 when M = X X^T."""
    W = np.asarray(W, dtype=np.float64)
    M = _as_cov_matrix(Mcov)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != W.shape[0] or B.shape[1] != W.shape[1] or A.shape[1] != B.shape[0]:
        raise ValueError(f"shape mismatch: W{W.shape} A{A.shape} B{B.shape}")
    if M.shape != (W.shape[1], W.shape[1]):
        raise ValueError(f"covariance shape {M.shape} does not match W{W.shape}")
    D = W - A @ B
    prod = (D @ M) * D
    val = float(prod.sum())
    if val < 0 and val >= -1e-12 * max(1.0, float(np.abs(prod).sum())):
        return 0.0
    return val


def svd_factorize(W, r: int, layer_name: str = "") -> LowRankFactors:
    W = np.asarray(W, dtype=np.float64)
    _check_rank(W, r)
    res = linalg.svd(W)
    root = np.sqrt(res.sigma[:r])
    return LowRankFactors(layer_name, res.U[:, :r] * root, root[:, None] * res.Vt[:r], "svd")


def whitened_factorize(W, Mcov, r: int, layer_name: str = "") -> LowRankFactors:
    """Exact minimizer of the activation-aware objective for a positive definite M.

    Raises :class:`~pareto_lowrank.linalg.NotPositiveDefinite` if M is singular.
    """
    W = np.asarray(W, dtype=np.float64)
    _check_rank(W, r)
    T = linalg.cholesky(_as_cov_matrix(Mcov))
    res = linalg.svd(W @ T)
    root = np.sqrt(res.sigma[:r])
    A = res.U[:, :r] * root
    C = root[:, None] * res.Vt[:r]
    # B = C T^{-1}  <=>  T^T B^T = C^T
    B = solve_triangular(T.T, C.T, lower=False).T if r else np.zeros((0, W.shape[1]))
    return LowRankFactors(layer_name, A, B, "whitened")


def als_factorize(
    W,
    Mcov,
    r: int,
    tau: int = DEFAULT_TAU,
    layer_name: str = "",
    early_stop: bool = False,
    rel_tol: float = linalg.PINV_RTOL,
) -> tuple[LowRankFactors, ObjectiveTrace]:
    """Alternating least squares from the SVD initialization.

    Each iteration sets ``A = W M B^T (B M B^T)^+`` and then
    ``B = (A^T A)^+ A^T W``; both are exact minimizers of their convex
    subproblem, so the objective never increases.
    """
    W = np.asarray(W, dtype=np.float64)
    M = _as_cov_matrix(Mcov)
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    init = svd_factorize(W, r, layer_name)
    A, B = init.A, init.B
    trace = ObjectiveTrace([objective(W, A, B, M)])
    if r == 0:
        return LowRankFactors(layer_name, A, B, "als", 0), trace
    with np.errstate(over="ignore", invalid="ignore"):
        WM = W @ M
    done = 0
    for it in range(1, tau + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                A = WM @ B.T @ linalg.pinv(B @ M @ B.T, rel_tol)
                B = linalg.pinv(A.T @ A, rel_tol) @ (A.T @ W)
        except ValueError as exc:
            raise FactorizationError(f"{layer_name or 'layer'}: {exc} at ALS iteration {it}") from exc
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise FactorizationError(f"{layer_name or 'layer'}: non-finite factors at ALS iteration {it}")
        trace.values.append(objective(W, A, B, M))
        done = it
        if early_stop:
            prev, cur = trace.values[-2], trace.values[-1]
            if prev - cur <= EARLY_STOP_RTOL * max(abs(prev), np.finfo(float).tiny):
                break
    return LowRankFactors(layer_name, A, B, "als", done), trace


def _factorize_layer(t: WeightTensor, cov: Covariance | None, r: int, tau: int, method: str, early_stop: bool):
    W = np.asarray(t.matrix, dtype=np.float64)
    if method == "svd":
        f = svd_factorize(W, r, t.name)
        return f, ObjectiveTrace([objective(W, f.A, f.B, np.eye(W.shape[1]))])
    if method == "whitened":
        f = whitened_factorize(W, cov, r, t.name)
        return f, ObjectiveTrace([objective(W, f.A, f.B, cov)])
    return als_factorize(W, cov, r, tau, t.name, early_stop)


def compress_model(
    tensors: Sequence[WeightTensor],
    covariances: Mapping[str, Covariance] | None,
    alloc: RankAllocation,
    tau: int = DEFAULT_TAU,
    method: str = "als",
    jobs: int = 1,
    early_stop: bool = False,
) -> list[tuple[LowRankFactors, ObjectiveTrace]]:
    """Factorize every allocated layer at its allocated rank.

    ``method="svd"`` ignores covariances and reports the weight-space objective.
    Output follows the order of ``tensors``; ``jobs > 1`` runs layers on a thread
    pool with identical results.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    by_name = {t.name: t for t in tensors}
    missing = [n for n in alloc.ranks if n not in by_name]
    if missing:
        raise KeyError(f"no tensor for allocated layer(s): {', '.join(missing)}")
    todo = [t for t in tensors if t.name in alloc.ranks]
    covs: dict[str, Covariance | None] = {}
    for t in todo:
        cov = None
        if method != "svd":
            if covariances is None or t.name not in covariances:
                raise KeyError(f"method {method!r} needs a covariance for layer {t.name!r}")
            cov = covariances[t.name]
        covs[t.name] = cov

    def run(t: WeightTensor):
        return _factorize_layer(t, covs[t.name], alloc.ranks[t.name], tau, method, early_stop)

    if jobs <= 1:
        return [run(t) for t in todo]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, todo))
