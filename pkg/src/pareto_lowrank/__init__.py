"""Pareto-guided low-rank compression of weight matrices.

Uniform-tolerance rank selection, activation-aware factorization (closed-form
whitening and alternating least squares), exact allocation oracles and a
first-order loss-sensitivity harness.
"""

from .allocate import (
    RankAllocation,
    SensitivityWeights,
    allocate_clustered,
    allocate_uniform,
    budget_to_epsilon,
    knapsack_oracle,
    lemma1_brackets,
    pareto_sweep,
)
from .factorize import LowRankFactors, ObjectiveTrace, als_factorize, compress_model, svd_factorize, whitened_factorize
from .linalg import NotPositiveDefinite
from .spectrum import SpectrumProfile, envelope, min_rank_for_tolerance, profile, relative_error
from .tensorio import Covariance, WeightTensor, read_container, write_container

__version__ = "0.1.0"
