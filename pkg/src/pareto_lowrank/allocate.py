"""Rank allocation across layers.

Uniform and per-group tolerance assignment, inversion of a parameter budget to a
tolerance, an exact knapsack solver for the weighted rank-allocation problem
(desk-scale), a brute-force solver for the equivalent tolerance-allocation
problem, frontier sweeps, and envelope-based tolerance brackets.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Mapping, Sequence

import numpy as np

from .spectrum import (
    EnvelopePair,
    SpectrumProfile,
    breakpoints,
    min_rank_for_tolerance,
    param_count,
    relative_error,
)

log = logging.getLogger(__name__)

MAX_CANDIDATE_RANKS = 2_000
MAX_REDUCED_BUDGET = 1_000_000
TIE_RTOL = 1e-12


@dataclass
class RankAllocation:
    ranks: dict[str, int]
    tolerances: dict[str, float]
    per_layer_error: dict[str, float]
    per_layer_params: dict[str, int]
    total_params: int
    dense_params: int

    @property
    def compression_ratio(self) -> float:
        """1 - S(r) / sum N*M over the allocated layers; may be negative."""
        if self.dense_params == 0:
            return 0.0
        return 1.0 - self.total_params / self.dense_params

    def to_report(self) -> dict:
        doc: dict = {}
        if len(set(self.tolerances.values())) == 1:
            doc["epsilon"] = next(iter(self.tolerances.values()))
        doc["epsilons"] = dict(self.tolerances)
        doc["per_layer"] = [
            {
                "name": name,
                "rank": r,
                "error": self.per_layer_error[name],
                "params": self.per_layer_params[name],
            }
            for name, r in self.ranks.items()
        ]
        doc["total_params"] = self.total_params
        doc["dense_params"] = self.dense_params
        doc["compression_ratio"] = self.compression_ratio
        return doc


@dataclass
class SensitivityWeights:
    """Per-layer weights on the relative errors in the surrogate loss."""

    alpha: dict[str, float]
    mode: str = "supplied"

    @classmethod
    def uniform(cls, names: Sequence[str], value: float = 1.0) -> "SensitivityWeights":
        return cls({n: float(value) for n in names}, "uniform")

    def __post_init__(self) -> None:
        if self.mode not in ("uniform", "supplied"):
            raise ValueError(f"unknown weight mode {self.mode!r}")
        if any(not (a >= 0 and math.isfinite(a)) for a in self.alpha.values()):
            raise ValueError("sensitivity weights must be finite and nonnegative")
        if self.mode == "uniform" and len(set(self.alpha.values())) > 1:
            raise ValueError("uniform weights must all be equal")

    def vector(self, profiles: Sequence[SpectrumProfile]) -> np.ndarray:
        try:
            return np.array([self.alpha[p.layer_name] for p in profiles], dtype=np.float64)
        except KeyError as exc:
            raise ValueError(f"no sensitivity weight for layer {exc.args[0]!r}") from None


def _weights_or_uniform(profiles, weights):
    if weights is None:
        return SensitivityWeights.uniform([p.layer_name for p in profiles])
    return weights


def allocation_from_ranks(
    profiles: Sequence[SpectrumProfile], ranks: Sequence[int], tolerances: Mapping[str, float]
) -> RankAllocation:
    names = [p.layer_name for p in profiles]
    if len(set(names)) != len(names):
        raise ValueError("layer names must be unique")
    params = {p.layer_name: param_count(p, r) for p, r in zip(profiles, ranks)}
    return RankAllocation(
        ranks={p.layer_name: int(r) for p, r in zip(profiles, ranks)},
        tolerances=dict(tolerances),
        per_layer_error={p.layer_name: relative_error(p, r) for p, r in zip(profiles, ranks)},
        per_layer_params=params,
        total_params=sum(params.values()),
        dense_params=sum(p.dense_params for p in profiles),
    )


def uniform_ranks(profiles: Sequence[SpectrumProfile], eps: float) -> list[int]:
    return [min_rank_for_tolerance(p, eps) for p in profiles]


def allocate_uniform(profiles: Sequence[SpectrumProfile], eps: float) -> RankAllocation:
    """One tolerance for every layer; the ranks come out heterogeneous."""
    ranks = uniform_ranks(profiles, eps)
    groups = dict.fromkeys(p.group for p in profiles)
    return allocation_from_ranks(profiles, ranks, {g: float(eps) for g in groups})


def allocate_clustered(profiles: Sequence[SpectrumProfile], group_tolerances: Mapping[str, float]) -> RankAllocation:
    missing = sorted({p.group for p in profiles} - set(group_tolerances))
    if missing:
        raise KeyError(f"no tolerance for group(s): {', '.join(missing)}")
    ranks = [min_rank_for_tolerance(p, group_tolerances[p.group]) for p in profiles]
    used = {g: float(group_tolerances[g]) for g in dict.fromkeys(p.group for p in profiles)}
    return allocation_from_ranks(profiles, ranks, used)


def aggregate_params(profiles: Sequence[SpectrumProfile], eps: float) -> int:
    """H(eps): total parameters of the uniform allocation at ``eps``."""
    return sum(param_count(p, r) for p, r in zip(profiles, uniform_ranks(profiles, eps)))


def candidate_tolerances(profiles: Sequence[SpectrumProfile]) -> np.ndarray:
    """All tolerances where H can change, plus the endpoints 0 and 1."""
    pts = [np.array([0.0, 1.0])] + [breakpoints(p) for p in profiles]
    return np.unique(np.concatenate(pts))


def budget_to_epsilon(profiles: Sequence[SpectrumProfile], budget: int) -> tuple[float, RankAllocation]:
    """Smallest breakpoint tolerance whose uniform allocation fits in ``budget``.

    H is a nonincreasing step function that only changes at the layers'
    breakpoints, so bisection over the sorted candidates is exact.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    cands = candidate_tolerances(profiles)
    if budget >= aggregate_params(profiles, 0.0):
        if budget > aggregate_params(profiles, 0.0):
            log.info("budget %d exceeds the full-rank total; returning eps = 0", budget)
        return 0.0, allocate_uniform(profiles, 0.0)
    lo, hi = 0, cands.size - 1  # H(cands[hi]) == 0 <= budget, H(cands[lo]) > budget
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if aggregate_params(profiles, float(cands[mid])) <= budget:
            hi = mid
        else:
            lo = mid
    eps = float(cands[hi])
    return eps, allocate_uniform(profiles, eps)


# --- exact solvers ---------------------------------------------------------


@dataclass
class KnapsackResult:
    objective: float
    ranks: list[int]
    total_params: int


def knapsack_oracle(
    profiles: Sequence[SpectrumProfile],
    weights: SensitivityWeights | None,
    budget: int,
) -> KnapsackResult:
    """Exactly minimize sum alpha_l e_l(r_l) subject to sum P_l(r_l) <= budget.

    Dynamic program over the parameter budget, measured in units of the gcd of
    the per-layer rank step sizes. Ties go to the smaller parameter total, then
    to the lexicographically smaller rank vector.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    alpha = _weights_or_uniform(profiles, weights).vector(profiles)
    n_cands = sum(p.k for p in profiles)
    if n_cands > MAX_CANDIDATE_RANKS:
        raise ValueError(f"instance too large for the exact solver: {n_cands} candidate ranks")
    if not profiles:
        return KnapsackResult(0.0, [], 0)
    unit = reduce(math.gcd, (p.step for p in profiles))
    steps = [p.step // unit for p in profiles]
    cap = min(budget // unit, sum(s * p.k for s, p in zip(steps, profiles)))
    if cap > MAX_REDUCED_BUDGET:
        raise ValueError(f"instance too large for the exact solver: reduced budget {cap}")

    L = len(profiles)
    costs = [alpha[l] * profiles[l].errors for l in range(L)]
    # suffix[l][c]: best objective of layers l.. using exactly c units
    suffix = [None] * (L + 1)
    tail = np.full(cap + 1, np.inf)
    tail[0] = 0.0
    suffix[L] = tail
    for l in range(L - 1, -1, -1):
        best = np.full(cap + 1, np.inf)
        s = steps[l]
        for r in range(profiles[l].k + 1):
            shift = r * s
            if shift > cap:
                break
            cand = costs[l][r] + tail[: cap + 1 - shift]
            np.minimum(best[shift:], cand, out=best[shift:])
        suffix[l] = best
        tail = best

    total = suffix[0]
    opt = float(total.min())
    c = int(np.flatnonzero(total <= opt + TIE_RTOL * max(1.0, abs(opt)))[0])
    ranks = []
    for l in range(L):
        s = steps[l]
        target = suffix[l][c]
        nxt = suffix[l + 1]
        for r in range(profiles[l].k + 1):
            rest = c - r * s
            if rest < 0:
                raise AssertionError("knapsack reconstruction failed")
            if costs[l][r] + nxt[rest] <= target + TIE_RTOL * max(1.0, abs(target)):
                ranks.append(r)
                c = rest
                break
    objective = float(sum(alpha[l] * profiles[l].errors[r] for l, r in enumerate(ranks)))
    total_params = sum(param_count(p, r) for p, r in zip(profiles, ranks))
    return KnapsackResult(objective, ranks, total_params)


def epsilon_allocation_enumerate(
    profiles: Sequence[SpectrumProfile],
    weights: SensitivityWeights | None,
    budget: int,
    max_points: int = 5_000_000,
) -> tuple[float, list[float]]:
    """Brute-force the tolerance-allocation problem over per-layer breakpoints.

    Minimizes sum alpha_l eps_l subject to sum h_l(eps_l) <= budget. Each h_l is a
    step function that only drops at its breakpoints, so an optimal eps_l can be
    taken from that finite set. Used as an independent check on the knapsack DP.
    """
    alpha = _weights_or_uniform(profiles, weights).vector(profiles)
    eps_sets, h_sets = [], []
    for p in profiles:
        e = breakpoints(p)
        eps_sets.append(e)
        h_sets.append(np.array([param_count(p, min_rank_for_tolerance(p, float(x))) for x in e]))
    size = math.prod(e.size for e in eps_sets)
    if size > max_points:
        raise ValueError(f"enumeration too large: {size} points")
    L = len(profiles)
    obj = np.zeros([1] * L)
    par = np.zeros([1] * L, dtype=np.int64)
    for l in range(L):
        shape = [1] * L
        shape[l] = -1
        obj = obj + alpha[l] * eps_sets[l].reshape(shape)
        par = par + h_sets[l].reshape(shape)
    masked = np.where(par <= budget, obj, np.inf)
    flat = int(np.argmin(masked))
    idx = np.unravel_index(flat, masked.shape)
    return float(masked[idx]), [float(eps_sets[l][i]) for l, i in enumerate(idx)]


def exhaustive_rank_search(
    profiles: Sequence[SpectrumProfile], weights: SensitivityWeights | None, budget: int
) -> tuple[float, tuple[int, ...]]:
    """Enumerate every rank vector; for tiny instances only."""
    alpha = _weights_or_uniform(profiles, weights).vector(profiles)
    best = (math.inf, ())
    for ranks in itertools.product(*(range(p.k + 1) for p in profiles)):
        if sum(param_count(p, r) for p, r in zip(profiles, ranks)) > budget:
            continue
        val = float(sum(a * p.errors[r] for a, p, r in zip(alpha, profiles, ranks)))
        if val < best[0]:
            best = (val, ranks)
    return best


# --- frontier --------------------------------------------------------------


@dataclass(frozen=True)
class FrontierPoint:
    eps: float
    total_params: int
    surrogate_loss: float
    ranks: tuple[int, ...] = field(compare=False)


def pareto_sweep(
    profiles: Sequence[SpectrumProfile],
    eps_grid: Sequence[float],
    weights: SensitivityWeights | None = None,
) -> list[FrontierPoint]:
    """(total params, surrogate loss) of the uniform allocation at each grid tolerance.

    Tolerances inducing the same rank vector collapse to one point, labelled with
    the smallest such tolerance. Output is sorted by parameter count.
    """
    alpha = _weights_or_uniform(profiles, weights).vector(profiles)
    seen: dict[tuple[int, ...], FrontierPoint] = {}
    for eps in sorted(float(e) for e in eps_grid):
        if not 0.0 <= eps <= 1.0:
            raise ValueError(f"tolerance {eps} outside [0, 1]")
        ranks = tuple(uniform_ranks(profiles, eps))
        if ranks in seen:
            continue
        params = sum(param_count(p, r) for p, r in zip(profiles, ranks))
        loss = float(sum(a * p.errors[r] for a, p, r in zip(alpha, profiles, ranks)))
        seen[ranks] = FrontierPoint(eps, params, loss, ranks)
    return sorted(seen.values(), key=lambda pt: (pt.total_params, pt.surrogate_loss, pt.eps))


def dominated_pairs(points: Sequence[FrontierPoint]) -> list[tuple[int, int]]:
    """Index pairs (i, j) where point i strictly beats point j on both objectives."""
    out = []
    for i, a in enumerate(points):
        for j, b in enumerate(points):
            if a.total_params < b.total_params and a.surrogate_loss < b.surrogate_loss:
                out.append((i, j))
    return out


# --- envelope brackets -----------------------------------------------------


def _generalized_inverse(grid: np.ndarray, values: np.ndarray, level: float) -> float:
    """Smallest eps with f(eps) <= level for a nonincreasing piecewise-linear f."""
    # values is nonincreasing; bisect for the first grid point at or below level
    j = int(np.searchsorted(-values, -level, side="left"))
    if j == 0:
        return float(grid[0])
    if j >= values.size:
        raise ValueError("level below the envelope's minimum")
    x0, x1 = grid[j - 1], grid[j]
    y0, y1 = values[j - 1], values[j]
    t = (y0 - level) / (y0 - y1)
    return float(min(max(x0 + t * (x1 - x0), x0), x1))


def lemma1_brackets(
    env: EnvelopePair, L: int, alpha: float, budget: float, normalizer: float
) -> tuple[float, float]:
    """Tolerances solving L*h_lower(eps) = b and L*h_upper(eps) = b.

    The envelopes are normalized by ``normalizer`` (the common full-rank parameter
    count), so the equations are solved at level ``b / (L * normalizer)``.
    ``alpha * L * eps_l`` and ``alpha * L * eps_u`` then bracket the optimum of the
    homogeneous tolerance-allocation problem.
    """
    if L < 1:
        raise ValueError("need at least one layer")
    level = budget / (L * normalizer)
    hi_u, lo_u = float(env.upper_values[0]), float(env.upper_values[-1])
    if not lo_u <= level <= hi_u:
        raise ValueError(f"budget outside feasible band [{L * normalizer * lo_u}, {L * normalizer * hi_u}]")
    eps_u = _generalized_inverse(env.grid, env.upper_values, level)
    eps_l = _generalized_inverse(env.grid, env.lower_values, level)
    return eps_l, eps_u
