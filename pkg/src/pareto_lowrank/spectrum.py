"""Per-layer SVD error profiles, the tolerance -> rank/parameter mapping, and
convex envelopes of normalized parameter profiles across layers."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

from . import linalg
from .tensorio import WeightTensor

# Singular values at or below this fraction of the largest are treated as exact zeros.
NUMERICAL_RANK_RTOL = 1e-12
ENVELOPE_GRID_SIZE = 256


@dataclass(frozen=True)
class SpectrumProfile:
    """Singular values of one weight matrix plus its truncation-error curve."""

    layer_name: str
    sigma: np.ndarray
    n_rows: int
    n_cols: int
    group: str = "default"
    errors: np.ndarray = field(init=False, repr=False, compare=False)
    total_energy: float = field(init=False)

    def __post_init__(self) -> None:
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim != 1 or s.size != min(self.n_rows, self.n_cols):
            raise ValueError(f"{self.layer_name}: expected {min(self.n_rows, self.n_cols)} singular values")
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError(f"{self.layer_name}: singular values must be nonnegative and nonincreasing")
        energy = s**2
        if s.size and s[0] > 0:
            energy[s <= NUMERICAL_RANK_RTOL * s[0]] = 0.0
        # tail[r] = sum_{i > r} sigma_i^2, accumulated from the small end.
        tail = np.concatenate([np.cumsum(energy[::-1])[::-1], [0.0]])
        total = float(tail[0])
        errors = np.sqrt(tail / total) if total > 0 else np.zeros_like(tail)
        errors = np.minimum.accumulate(errors)
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "total_energy", total)
        object.__setattr__(self, "errors", errors)

    @classmethod
    def from_singular_values(cls, name: str, sigma, n_rows: int, n_cols: int, group: str = "default"):
        s = np.sort(np.abs(np.asarray(sigma, dtype=np.float64)))[::-1]
        return cls(name, s, n_rows, n_cols, group)

    @property
    def k(self) -> int:
        return int(self.sigma.size)

    @property
    def degenerate(self) -> bool:
        return self.total_energy == 0.0

    @property
    def numerical_rank(self) -> int:
        if self.degenerate:
            return 0
        return int(np.count_nonzero(self.sigma > NUMERICAL_RANK_RTOL * self.sigma[0]))

    @property
    def dense_params(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def step(self) -> int:
        """Parameters added per unit of rank."""
        return self.n_rows + self.n_cols


def profile(W: WeightTensor) -> SpectrumProfile:
    m = np.asarray(W.matrix, dtype=np.float64)
    res = linalg.svd(m)
    return SpectrumProfile(W.name, res.sigma, m.shape[0], m.shape[1], W.group)


def relative_error(p: SpectrumProfile, r: int) -> float:
    """||W - W_r||_F / ||W||_F for the rank-r truncated SVD (zero for a zero matrix)."""
    if not 0 <= r <= p.k:
        raise ValueError(f"rank {r} outside [0, {p.k}]")
    return float(p.errors[r])


def min_rank_for_tolerance(p: SpectrumProfile, eps: float) -> int:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"tolerance {eps} outside [0, 1]")
    # errors is nonincreasing and errors[k] == 0, so a match always exists
    return int(np.argmax(p.errors <= eps))


def param_count(p: SpectrumProfile, r: int) -> int:
    if r < 0:
        raise ValueError("rank must be nonnegative")
    return int(r) * p.step


def h_mapping(p: SpectrumProfile, eps: float) -> int:
    return param_count(p, min_rank_for_tolerance(p, eps))


def breakpoints(p: SpectrumProfile) -> np.ndarray:
    """Ascending distinct tolerances at which the parameter mapping changes value."""
    return np.unique(p.errors)


def write_profile_csv(profiles: Sequence[SpectrumProfile], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "r", "error", "params"])
        for p in profiles:
            for r in range(p.k + 1):
                w.writerow([p.layer_name, r, repr(float(p.errors[r])), param_count(p, r)])


# --- envelopes -------------------------------------------------------------


@dataclass(frozen=True)
class EnvelopePair:
    """Piecewise-linear convex nonincreasing bounds on normalized profiles."""

    grid: np.ndarray
    lower_values: np.ndarray
    upper_values: np.ndarray
    coverage_fraction: float
    retained: tuple[str, ...] = ()

    def lower(self, eps):
        return np.interp(eps, self.grid, self.lower_values)

    def upper(self, eps):
        return np.interp(eps, self.grid, self.upper_values)


def envelope_grid(size: int = ENVELOPE_GRID_SIZE) -> np.ndarray:
    return np.linspace(0.0, 1.0, size)


def normalized_curve(p: SpectrumProfile, grid: np.ndarray) -> np.ndarray:
    """h(eps) / P(k) sampled on ``grid``; identically zero for a degenerate layer."""
    full = param_count(p, p.k)
    return np.array([h_mapping(p, float(e)) for e in grid], dtype=np.float64) / full


def convex_minorant(values: np.ndarray) -> np.ndarray:
    """Greatest convex minorant of samples on a uniform grid (lower convex hull)."""
    n = values.size
    hull: list[int] = []
    for i in range(n):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b if it lies on or above the chord a -> i
            if (values[b] - values[a]) * (i - a) >= (values[i] - values[a]) * (b - a):
                hull.pop()
            else:
                break
        hull.append(i)
    return np.interp(np.arange(n), hull, values[hull])


def convex_majorant(values: np.ndarray) -> np.ndarray:
    """A least-area convex nonincreasing majorant of samples on a uniform grid.

    Solved as a small linear program, then shifted up by any residual solver
    infeasibility (a constant shift keeps convexity and monotonicity).
    """
    n = values.size
    if n <= 2:
        return np.maximum.accumulate(values[::-1])[::-1].astype(np.float64)
    rows, cols, data = [], [], []
    r = 0
    for j in range(n - 1):  # g[j+1] - g[j] <= 0
        rows += [r, r]
        cols += [j + 1, j]
        data += [1.0, -1.0]
        r += 1
    for j in range(1, n - 1):  # -(g[j-1] - 2 g[j] + g[j+1]) <= 0
        rows += [r, r, r]
        cols += [j - 1, j, j + 1]
        data += [-1.0, 2.0, -1.0]
        r += 1
    A = csr_matrix((data, (rows, cols)), shape=(r, n))
    top = float(values.max())
    res = linprog(
        np.ones(n),
        A_ub=A,
        b_ub=np.zeros(r),
        bounds=[(float(v), max(top, float(v))) for v in values],
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"envelope LP failed: {res.message}")
    g = res.x
    return g + max(0.0, float(np.max(values - g)))


def envelope(
    profiles: Sequence[SpectrumProfile],
    trim_fraction: float = 0.02,
    grid_size: int = ENVELOPE_GRID_SIZE,
    conservative: bool = False,
) -> EnvelopePair:
    """Common convex envelopes of the layers' normalized parameter curves.

    Layers are ranked by sup-distance of their curve from the pointwise median
    and the ``floor(trim_fraction * L)`` farthest ones are dropped.

    With ``conservative=True`` each bound is fitted against the neighbouring grid
    sample (left neighbour for the upper bound, right neighbour for the lower),
    so the piecewise-linear envelopes bound the step functions on all of [0, 1],
    not only at the grid points.
    """
    if not profiles:
        raise ValueError("envelope of an empty profile list")
    if not 0.0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")
    grid = envelope_grid(grid_size)
    curves = np.stack([normalized_curve(p, grid) for p in profiles])
    median = np.median(curves, axis=0)
    dist = np.abs(curves - median).max(axis=1)
    n_drop = int(math.floor(trim_fraction * len(profiles)))
    order = np.argsort(-dist, kind="stable")
    keep = np.sort(order[n_drop:])
    kept = curves[keep]

    top = kept.max(axis=0)
    bottom = kept.min(axis=0)
    if conservative:
        top = np.concatenate([[top[0]], top[:-1]])
        bottom = np.concatenate([bottom[1:], [bottom[-1]]])
    return EnvelopePair(
        grid=grid,
        lower_values=convex_minorant(bottom),
        upper_values=convex_majorant(top),
        coverage_fraction=keep.size / len(profiles),
        retained=tuple(profiles[i].layer_name for i in keep),
    )
