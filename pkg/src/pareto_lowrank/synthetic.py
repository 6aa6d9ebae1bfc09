"""Seeded generators for synthetic models, calibration data and test instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectrum import SpectrumProfile
from .tensorio import CalibrationRecord, Covariance, WeightTensor, covariance_from_activations

SPECTRUM_FAMILIES = ("power", "exp", "lowrank", "flat")


def random_orthonormal(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """n x k matrix with orthonormal columns (Haar-distributed up to signs)."""
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def matrix_with_spectrum(rng: np.random.Generator, n_rows: int, n_cols: int, sigma) -> np.ndarray:
    k = min(n_rows, n_cols)
    s = np.zeros(k)
    s[: len(sigma)] = np.sort(np.asarray(sigma, dtype=np.float64))[::-1][:k]
    return (random_orthonormal(rng, n_rows, k) * s) @ random_orthonormal(rng, n_cols, k).T


def spectrum(family: str, k: int, param: float) -> np.ndarray:
    """Nonincreasing singular values of length k for a named decay family."""
    i = np.arange(1, k + 1, dtype=np.float64)
    if family == "power":
        return i**-param
    if family == "exp":
        return np.exp(-param * (i - 1))
    if family == "lowrank":
        r = max(1, int(round(param * k)))
        return np.where(i <= r, 1.0, 0.05)
    if family == "flat":
        return np.ones(k)
    raise ValueError(f"unknown spectrum family {family!r}")


@dataclass
class SyntheticModel:
    tensors: list[WeightTensor]
    calibration: list[CalibrationRecord]
    spectra: dict[str, np.ndarray]


# (family, parameter) per layer slot of the mixed-spectra model; cycles when n_layers > 12
MIXED_SPECTRA = [
    ("power", 1.2),
    ("exp", 0.05),
    ("lowrank", 0.15),
    ("power", 1.0),
    ("exp", 0.15),
    ("lowrank", 0.4),
    ("power", 1.5),
    ("exp", 0.3),
    ("lowrank", 0.25),
    ("power", 2.0),
    ("exp", 0.08),
    ("power", 0.8),
]


def mixed_model(
    seed: int = 0,
    n_layers: int = 12,
    n_rows: int = 64,
    n_cols: int = 64,
    groups: tuple[str, ...] = ("default",),
    samples: int | None = None,
    calib_form: str = "cov",
) -> SyntheticModel:
    """Layers with deliberately different singular-value decay, plus calibration data.

    Layer ``i`` belongs to ``groups[i % len(groups)]``. Activations are anisotropic
    Gaussian samples; ``samples < n_cols`` gives rank-deficient covariances.
    """
    rng = np.random.default_rng(seed)
    k = min(n_rows, n_cols)
    samples = 2 * n_cols + 8 if samples is None else samples
    tensors, calib, spectra = [], [], {}
    for i in range(n_layers):
        family, param = MIXED_SPECTRA[i % len(MIXED_SPECTRA)]
        name = f"layer{i:02d}"
        s = spectrum(family, k, param) * rng.uniform(0.5, 2.0)
        spectra[name] = np.sort(s)[::-1]
        tensors.append(WeightTensor(name, matrix_with_spectrum(rng, n_rows, n_cols, s), groups[i % len(groups)]))
        X = anisotropic_activations(rng, n_cols, samples)
        if calib_form == "cov":
            calib.append(CalibrationRecord(name, covariance=covariance_from_activations(X)))
        elif calib_form == "act":
            calib.append(CalibrationRecord(name, activations=X))
        else:
            raise ValueError(f"unknown calibration form {calib_form!r}")
    return SyntheticModel(tensors, calib, spectra)


def anisotropic_activations(rng: np.random.Generator, dim: int, samples: int, spread: float = 1.0) -> np.ndarray:
    """dim x samples activations with per-direction scales in [e^-spread, e^spread]."""
    scales = np.exp(rng.uniform(-spread, spread, dim))
    return random_orthonormal(rng, dim, dim) @ (scales[:, None] * rng.standard_normal((dim, samples)))


@dataclass
class FactorizationInstance:
    W: np.ndarray
    cov: Covariance
    rank: int


def gapped_instance(
    rng: np.random.Generator,
    max_dim: int = 32,
    tail_ratio: float = 0.3,
    rank_deficient: bool = False,
) -> FactorizationInstance:
    """Random (W, M, r) with a spectral gap after the target rank.

    The leading r singular values are drawn from [1, 3], the rest from
    [0, tail_ratio]. M is an anisotropic sample covariance; with
    ``rank_deficient`` it has fewer samples than dimensions.
    """
    N = int(rng.integers(4, max_dim + 1))
    M = int(rng.integers(4, max_dim + 1))
    k = min(N, M)
    r = int(rng.integers(1, k))
    s = np.concatenate([rng.uniform(1.0, 3.0, r), tail_ratio * rng.uniform(0.0, 1.0, k - r)])
    W = matrix_with_spectrum(rng, N, M, s)
    samples = int(rng.integers(1, M)) if rank_deficient else 2 * M + 8
    X = anisotropic_activations(rng, M, samples)
    return FactorizationInstance(W, covariance_from_activations(X), r)


def random_profile(rng: np.random.Generator, name: str, max_dim: int = 12, min_dim: int = 2) -> SpectrumProfile:
    """Profile with random shape and a randomly chosen decay family."""
    N = int(rng.integers(min_dim, max_dim + 1))
    M = int(rng.integers(min_dim, max_dim + 1))
    return random_profile_shaped(rng, name, N, M)


def random_profile_shaped(rng: np.random.Generator, name: str, N: int, M: int, group: str = "default") -> SpectrumProfile:
    k = min(N, M)
    family = SPECTRUM_FAMILIES[int(rng.integers(0, 3))]
    if family == "power":
        s = spectrum("power", k, rng.uniform(0.3, 2.5))
    elif family == "exp":
        s = spectrum("exp", k, rng.uniform(0.05, 1.0))
    else:
        s = np.sort(rng.exponential(1.0, k))[::-1]
    s = s * rng.uniform(0.5, 3.0)
    return SpectrumProfile.from_singular_values(name, s, N, M, group)
