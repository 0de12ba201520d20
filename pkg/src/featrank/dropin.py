"""Elementwise multiplicative input layer with magnitude pruning.

Every input feature x_j is multiplied by its own weight w_j before it reaches
the first dense layer. Weights start at one, so a fresh layer is the identity;
pruning w_j to zero removes feature j from the network for good.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PenaltyConfig:
    """Extra loss terms on the drop-in weights."""

    lam: float = 1.0
    gamma: float = 10.0
    enable_l1: bool = False
    enable_wvl: bool = False
    # sigmoid(20 * (w - 0.5)) instead of sigmoid(20 * w - 0.5)
    wvl_centered: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("penalty coefficients must be >= 0")

    @property
    def active(self) -> bool:
        return self.enable_l1 or self.enable_wvl


@dataclass
class DropInLayer:
    weights: np.ndarray
    mask: np.ndarray
    # round (1-based) at which each feature was pruned, 0 while active
    pruned_round: np.ndarray = field(default=None)
    pruned_magnitude: np.ndarray = field(default=None)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.weights.shape != self.mask.shape or self.weights.ndim != 1:
            raise ValueError("weights and mask must be 1-d and the same length")
        if self.pruned_round is None:
            self.pruned_round = np.zeros(self.size, dtype=np.int64)
        if self.pruned_magnitude is None:
            self.pruned_magnitude = np.zeros(self.size, dtype=np.float64)
        self.weights[~self.mask] = 0.0

    @classmethod
    def fresh(cls, d: int) -> "DropInLayer":
        return cls(np.ones(d), np.ones(d, dtype=bool))

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def active_count(self) -> int:
        return int(self.mask.sum())

    def copy(self) -> "DropInLayer":
        return DropInLayer(
            self.weights.copy(),
            self.mask.copy(),
            self.pruned_round.copy(),
            self.pruned_magnitude.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "mask": self.mask.tolist(),
            "pruned_round": self.pruned_round.tolist(),
        }


def apply(layer: DropInLayer, x: np.ndarray) -> np.ndarray:
    """Multiply features (a vector or a row batch) by the active weights."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.size:
        raise ValueError(f"expected {layer.size} features, got {x.shape[-1]}")
    return x * np.where(layer.mask, layer.weights, 0.0)


def prune_smallest(layer: DropInLayer, k: int, round_index: int = 1) -> DropInLayer:
    """Return a copy with the k smallest-|w| active weights set to zero.

    Ties in magnitude go to the lowest feature index.
    """
    if k < 0 or k > layer.active_count:
        raise ValueError(f"cannot prune {k} of {layer.active_count} active weights")
    out = layer.copy()
    if k == 0:
        return out
    active = np.flatnonzero(layer.mask)
    mags = np.abs(layer.weights[active])
    order = np.lexsort((active, mags))
    victims = active[order[:k]]
    out.pruned_magnitude[victims] = np.abs(layer.weights[victims])
    out.pruned_round[victims] = round_index
    out.weights[victims] = 0.0
    out.mask[victims] = False
    return out


def l1_penalty(layer: DropInLayer, lam: float) -> float:
    return float(lam * np.abs(layer.weights[layer.mask]).sum())


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _wvl_argument(w, centered):
    return 20.0 * (w - 0.5) if centered else 20.0 * w - 0.5


def wvl_penalty(layer: DropInLayer, gamma: float, centered: bool = False) -> float:
    """Negative scaled population variance of sigmoid(20 w - 0.5) over active weights."""
    w = layer.weights[layer.mask]
    if w.size < 2:
        raise ValueError("weight variance loss needs at least 2 active weights")
    s = _sigmoid(_wvl_argument(w, centered))
    return float(-gamma * s.var())


def penalty_value(layer: DropInLayer, cfg: PenaltyConfig) -> float:
    total = 0.0
    if cfg.enable_l1:
        total += l1_penalty(layer, cfg.lam)
    if cfg.enable_wvl:
        total += wvl_penalty(layer, cfg.gamma, cfg.wvl_centered)
    return total


def penalty_gradient(layer: DropInLayer, cfg: PenaltyConfig) -> np.ndarray:
    """Gradient (subgradient for l1) of the enabled penalties; zero on pruned slots."""
    grad = np.zeros(layer.size)
    m = layer.mask
    w = layer.weights[m]
    if cfg.enable_l1:
        grad[m] += cfg.lam * np.sign(w)
    if cfg.enable_wvl and w.size >= 2:
        s = _sigmoid(_wvl_argument(w, cfg.wvl_centered))
        dvar_ds = 2.0 * (s - s.mean()) / w.size
        grad[m] += -cfg.gamma * dvar_ds * 20.0 * s * (1.0 - s)
    return grad
