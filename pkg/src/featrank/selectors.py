"""Feature ranking methods.

Every ranker returns a :class:`FeatureRanking` whose scores are "higher means
more important":

* ``swpa``: stepwise magnitude pruning of a drop-in input layer,
* ``sbs``: absolute mean input gradient of the true-class probability,
* ``pfi``: mean validation-accuracy drop under column permutation,
* ``random``: a seeded shuffle, used as the baseline.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal

import numpy as np

from featrank.data import SplitDataset
from featrank.dropin import PenaltyConfig, prune_smallest
from featrank.nn import (
    Network,
    NetworkSpec,
    TrainConfig,
    TrainResult,
    init_network,
    input_gradients,
    predict,
    train,
)

METHODS = ("swpa", "sbs", "pfi", "random")


@dataclass
class FeatureRanking:
    scores: np.ndarray
    method: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.method not in METHODS:
            raise ValueError(f"unknown ranking method {self.method!r}")
        if self.scores.ndim != 1 or not np.isfinite(self.scores).all():
            raise ValueError("scores must be a finite vector")

    @property
    def d(self) -> int:
        return self.scores.shape[0]

    def ordering(self) -> np.ndarray:
        """Feature indices from most to least important (ties: lower index first)."""
        return np.lexsort((np.arange(self.d), -self.scores))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "params": self.metadata,
            "scores": self.scores.tolist(),
            "ordering": self.ordering().tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureRanking":
        return cls(np.array(obj["scores"], dtype=np.float64), obj["method"], obj.get("params", {}))


def keep_count(f: float, d: int) -> int:
    """floor(f * d), evaluated on the decimal value of ``f`` (0.29 * 100 -> 29)."""
    return int((Decimal(repr(float(f))) * d).to_integral_value(rounding=ROUND_FLOOR))


def top_bottom(ranking: FeatureRanking, f: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the floor(f*d) highest- and lowest-scoring features.

    Both lists run from the extreme inwards; equal scores are taken in
    increasing index order on either end.
    """
    if not 0 < f <= 0.5:
        raise ValueError(f"fraction must be in (0, 0.5], got {f}")
    k = keep_count(f, ranking.d)
    if k == 0:
        raise ValueError(f"floor({f} * {ranking.d}) = 0 features selected")
    idx = np.arange(ranking.d)
    top = np.lexsort((idx, -ranking.scores))[:k]
    bottom = np.lexsort((idx, ranking.scores))[:k]
    return top, bottom


# -- SWPA --------------------------------------------------------------------

@dataclass
class SwpaConfig:
    n: int = 4
    f: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("step counter n must be >= 1")
        if not 0 <= self.f <= 1:
            raise ValueError("selection factor f must be in [0, 1]")


def swpa_schedule(d: int, f: float, n: int) -> list[int]:
    """Features to prune before training rounds 2..n+1.

    The first n-1 steps each remove floor(total/n); the last step removes the
    remainder, so exactly floor(f*d) features survive.
    """
    keep = keep_count(f, d)
    if keep == 0:
        raise ValueError(f"floor({f} * {d}) = 0: no feature would survive")
    total = d - keep
    step = total // n
    return [step] * (n - 1) + [total - step * (n - 1)]


def swpa_rank(data: SplitDataset, spec: NetworkSpec, cfg: SwpaConfig, seed: int = 0):
    """Rank features by stepwise pruning of a jointly trained drop-in layer.

    Returns ``(ranking, rounds)`` where ``rounds`` holds the TrainResult of each
    of the n+1 training rounds. Survivors are ordered by final |w|; pruned
    features sit below them, earlier rounds lower, then by |w| when pruned.
    """
    d = data.feature_count
    if spec.n_inputs != d:
        raise ValueError(f"network takes {spec.n_inputs} inputs, data has {d}")
    schedule = swpa_schedule(d, cfg.f, cfg.n)
    tcfg = TrainConfig(**{**cfg.train.__dict__, "penalty": cfg.penalty})

    net = init_network(spec, seed, dropin=True)
    rounds: list[TrainResult] = []
    for count in range(1, cfg.n + 2):
        if count > 1:
            net.dropin = prune_smallest(net.dropin, schedule[count - 2], round_index=count - 1)
        round_cfg = TrainConfig(**{**tcfg.__dict__, "seed": _mix(tcfg.seed, count)})
        result = train(net, data, round_cfg)
        rounds.append(result)
        net = result.best_network

    layer = net.dropin
    mags = np.where(layer.mask, np.abs(layer.weights), layer.pruned_magnitude)
    # survivors get the sentinel round n+1 so they sort above every pruned feature
    stage = np.where(layer.mask, cfg.n + 1, layer.pruned_round)
    least_first = np.lexsort((np.arange(d), mags, stage))
    scores = np.empty(d)
    scores[least_first] = np.arange(d, dtype=np.float64)
    meta = {
        "n": cfg.n,
        "f": cfg.f,
        "schedule": schedule,
        "survivors": np.flatnonzero(layer.mask).tolist(),
        "dropin_weights": layer.weights.tolist(),
        "pruned_round": layer.pruned_round.tolist(),
        "penalty": dict(cfg.penalty.__dict__),
        "seed": seed,
    }
    return FeatureRanking(scores, "swpa", meta), rounds


def _mix(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


# -- SBS ---------------------------------------------------------------------

def sbs_rank(data: SplitDataset, net: Network, mean_of_abs: bool = False,
             require_trained: bool = True, batch_size: int = 1024) -> FeatureRanking:
    """Sensitivity ranking: |mean over training rows of d p_true / d x|.

    ``mean_of_abs=True`` averages |gradient| instead (signed gradients of
    different rows can cancel in the default form).
    """
    if not net.is_finite():
        raise ValueError("network has non-finite parameters")
    if require_trained and net.epochs_trained == 0:
        raise ValueError("network has not been trained")
    X, y = data.train.X, data.train.y
    total = np.zeros(X.shape[1])
    for start in range(0, X.shape[0], batch_size):
        g = input_gradients(net, X[start:start + batch_size], y[start:start + batch_size])
        total += (np.abs(g) if mean_of_abs else g).sum(axis=0)
    mean = total / X.shape[0]
    return FeatureRanking(np.abs(mean), "sbs", {"split": "train", "mean_of_abs": mean_of_abs})


# -- PFI ---------------------------------------------------------------------

def permutation_rng(seed: int, dim: int, trial: int) -> np.random.Generator:
    """Independent stream for one (feature, trial) pair."""
    return np.random.default_rng([seed, dim, trial])


def worker_count() -> int:
    env = os.environ.get("FEATRANK_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def pfi_rank(data: SplitDataset, net: Network, c: int = 10, seed: int = 0,
             threads: int | None = None) -> FeatureRanking:
    """Permutation importance on the validation split.

    score[j] = mean over c trials of acc(X, y) - acc(X with column j shuffled, y).
    Only rows whose value actually changes are re-scored; all other
    predictions are unchanged by construction.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    X, y = data.val.X, data.val.y
    n, d = X.shape
    base_pred = predict(net, X)
    base_correct = base_pred == y
    base_acc = base_correct.mean()

    def score(dim: int) -> float:
        col = X[:, dim]
        total = 0.0
        for trial in range(c):
            perm = permutation_rng(seed, dim, trial).permutation(n)
            new_col = col[perm]
            changed = np.flatnonzero(new_col != col)
            correct = base_correct.copy()
            if changed.size:
                rows = X[changed].copy()
                rows[:, dim] = new_col[changed]
                correct[changed] = predict(net, rows) == y[changed]
            total += base_acc - correct.mean()
        return total / c

    workers = threads or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(score, range(d)))
    else:
        scores = [score(j) for j in range(d)]
    return FeatureRanking(np.array(scores), "pfi", {"c": c, "seed": seed, "split": "val"})


def random_rank(d: int, seed: int) -> FeatureRanking:
    if d < 1:
        raise ValueError("d must be >= 1")
    scores = np.random.default_rng(seed).permutation(np.arange(1, d + 1)).astype(np.float64)
    return FeatureRanking(scores, "random", {"seed": seed})


def base_network(data: SplitDataset, spec: NetworkSpec, cfg: TrainConfig, seed: int) -> TrainResult:
    """Train a plain full-feature network (the model SBS and PFI explain)."""
    return train(init_network(spec, seed), data, cfg)

