"""First-order loss sensitivity of a feed-forward chain to weight perturbations.

A toy network ``x_{l+1} = act(W_l x_l)`` with an elementwise activation whose
derivative is bounded by ``c``. For weight perturbations ``dW_l`` the loss change
is bounded to first order by

    G * sum_l (prod_{m>l} K_m) * c * ||dW_l X_l||_F

with ``G = ||dL/dY||_F`` and ``K_m`` the largest per-sample Jacobian norm of
layer ``m``. The per-layer coefficients ``alpha_l`` used for rank allocation
replace ``||dW_l X_l||_F`` by ``e_l ||W_l||_F ||X_l||_F``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .allocate import SensitivityWeights
from .linalg import spectral_norm


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# name -> (activation, derivative, sup |derivative|)
ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z), 1.0),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2, 1.0),
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z)), 0.25),
}
ACTIVATIONS["scaled-sigmoid"] = ACTIVATIONS["sigmoid"]
LOSSES = ("linear", "squared")


@dataclass
class ToyNetwork:
    """Feed-forward chain with a built-in differentiable loss.

    ``loss="linear"`` is ``<C, Y>`` with ``loss_target = C``; ``loss="squared"`` is
    ``0.5 * ||Y - target||_F^2``.
    """

    layers: list[np.ndarray]
    activation: str = "tanh"
    loss: str = "squared"
    loss_target: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        self.layers = [np.asarray(W, dtype=np.float64) for W in self.layers]
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError(f"layer dimensions do not compose: {a.shape} then {b.shape}")

    @property
    def c(self) -> float:
        return ACTIVATIONS[self.activation][2]

    def evaluate_loss(self, Y: np.ndarray) -> float:
        T = self.loss_target
        if self.loss == "linear":
            return float(np.sum(T * Y))
        return 0.5 * float(np.sum((Y - T) ** 2))

    def loss_gradient(self, Y: np.ndarray) -> np.ndarray:
        if self.loss == "linear":
            return np.array(self.loss_target, dtype=np.float64)
        return Y - self.loss_target


@dataclass
class SensitivityEstimate:
    G: float
    K: list[float]
    bound: float
    alpha: list[float]
    c: float = 1.0
    layer_terms: list[float] = field(default_factory=list)


def _check_input(net: ToyNetwork, X1: np.ndarray) -> np.ndarray:
    X1 = np.asarray(X1, dtype=np.float64)
    if X1.ndim != 2 or X1.shape[0] != net.layers[0].shape[1]:
        raise ValueError(f"input batch shape {X1.shape} does not match first layer {net.layers[0].shape}")
    return X1


def forward(net: ToyNetwork, X1, layers: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Activations ``[X_1, ..., X_{L+1}]``; ``layers`` overrides the weights."""
    act = ACTIVATIONS[net.activation][0]
    xs = [_check_input(net, X1)]
    for W in layers if layers is not None else net.layers:
        xs.append(act(W @ xs[-1]))
    return xs


def jacobian_norm(W, Z, activation: str) -> float:
    """max_i || diag(act'(z_i)) W ||_2 over the columns z_i of the preactivation batch."""
    deriv = ACTIVATIONS[activation][1]
    W = np.asarray(W, dtype=np.float64)
    D = deriv(np.asarray(Z, dtype=np.float64))
    return max(spectral_norm(D[:, i : i + 1] * W) for i in range(D.shape[1]))


def _check_deltas(net: ToyNetwork, deltas) -> list[np.ndarray]:
    if len(deltas) != len(net.layers):
        raise ValueError("need one perturbation per layer")
    out = []
    for W, dW in zip(net.layers, deltas):
        dW = np.asarray(dW, dtype=np.float64)
        if dW.shape != W.shape:
            raise ValueError(f"perturbation shape {dW.shape} does not match layer {W.shape}")
        out.append(dW)
    return out


def _downstream_products(K: list[float]) -> list[float]:
    # prod_{m > l} K_m for each l; empty product is 1
    out = [1.0] * len(K)
    acc = 1.0
    for l in range(len(K) - 1, -1, -1):
        out[l] = acc
        acc *= K[l]
    return out


def theorem1_bound(net: ToyNetwork, X1, deltas) -> SensitivityEstimate:
    deltas = _check_deltas(net, deltas)
    xs = forward(net, X1)
    G = float(np.linalg.norm(net.loss_gradient(xs[-1])))
    K = [jacobian_norm(W, W @ x, net.activation) for W, x in zip(net.layers, xs)]
    down = _downstream_products(K)
    c = net.c
    terms = [G * down[l] * c * float(np.linalg.norm(deltas[l] @ xs[l])) for l in range(len(K))]
    alpha = [
        G * down[l] * c * float(np.linalg.norm(xs[l])) * float(np.linalg.norm(net.layers[l]))
        for l in range(len(K))
    ]
    return SensitivityEstimate(G, K, float(sum(terms)), alpha, c, terms)


def loss_delta(net: ToyNetwork, X1, deltas) -> float:
    """L(perturbed) - L(original), from two exact forward passes."""
    deltas = _check_deltas(net, deltas)
    base = net.evaluate_loss(forward(net, X1)[-1])
    pert = net.evaluate_loss(forward(net, X1, [W + d for W, d in zip(net.layers, deltas)])[-1])
    return pert - base


def alpha_weights(net: ToyNetwork, X1, names: Sequence[str] | None = None) -> SensitivityWeights:
    est = theorem1_bound(net, X1, [np.zeros_like(W) for W in net.layers])
    if names is None:
        names = [f"layer{l}" for l in range(len(net.layers))]
    return SensitivityWeights(dict(zip(names, est.alpha)), "supplied")


def random_network(
    rng: np.random.Generator,
    widths: Sequence[int],
    activation: str = "tanh",
    loss: str = "squared",
    batch: int = 8,
    weight_scale: float = 1.0,
) -> tuple[ToyNetwork, np.ndarray]:
    """Gaussian toy network with widths ``[d_0, ..., d_L]`` and an input batch."""
    layers = [
        weight_scale * rng.standard_normal((widths[i + 1], widths[i])) / np.sqrt(widths[i])
        for i in range(len(widths) - 1)
    ]
    X1 = rng.standard_normal((widths[0], batch))
    target = rng.standard_normal((widths[-1], batch))
    return ToyNetwork(layers, activation, loss, target), X1


def bound_tolerance(t: float) -> float:
    """Allowed |dL| / bound at perturbation scale t: 1.05 at 1e-3, 1.005 at 1e-4."""
    return 1.0 + 50.0 * t
