"""Small dense feedforward classifier with hand-written backprop.

Matrices are plain float64 numpy arrays (rows = samples). Hidden layers use
ReLU or tanh, the output layer is a softmax trained with cross-entropy, and an
optional drop-in layer scales the raw inputs before the first dense layer.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from featrank.dropin import DropInLayer, PenaltyConfig, penalty_gradient, penalty_value

if TYPE_CHECKING:
    from featrank.data import SplitDataset


class ShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("a network needs at least an input and an output size")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be >= 1: {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class Network:
    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropin: DropInLayer | None = None
    velocity_w: list[np.ndarray] = field(default_factory=list)
    velocity_b: list[np.ndarray] = field(default_factory=list)
    velocity_dropin: np.ndarray | None = None
    epochs_trained: int = 0

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("one weight matrix and bias vector per layer expected")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ShapeError(f"layer {i}: got W{w.shape}, b{b.shape}")
        if self.dropin is not None and self.dropin.size != sizes[0]:
            raise ShapeError("drop-in layer width must equal the input size")
        self.reset_momentum()

    def reset_momentum(self):
        self.velocity_w = [np.zeros_like(w) for w in self.weights]
        self.velocity_b = [np.zeros_like(b) for b in self.biases]
        self.velocity_dropin = None if self.dropin is None else np.zeros(self.dropin.size)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def is_finite(self) -> bool:
        params = self.weights + self.biases
        if self.dropin is not None:
            params.append(self.dropin.weights)
        return all(np.isfinite(p).all() for p in params)

    def to_dict(self) -> dict:
        out = {
            "layer_sizes": list(self.spec.layer_sizes),
            "activation": self.spec.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }
        if self.dropin is not None:
            out["dropin"] = self.dropin.to_dict()
        return out


def init_network(spec: NetworkSpec, seed: int, dropin: bool = False) -> Network:
    """He-uniform weights, zero biases; drop-in weights (if any) start at one."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    layer = DropInLayer.fresh(spec.n_inputs) if dropin else None
    return Network(spec, weights, biases, dropin=layer)


@dataclass
class TrainConfig:
    max_epochs: int = 20000
    patience: int = 2000
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    penalty: PenaltyConfig | None = None

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    best_network: Network
    best_val_accuracy: float
    best_epoch: int
    epochs_run: int
    history: list[tuple[float, float]]

    def to_dict(self, include_history: bool = True) -> dict:
        out = {
            "best_val_accuracy": self.best_val_accuracy,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
        }
        if include_history:
            out["history"] = [list(h) for h in self.history]
        return out


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(net: Network, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.spec.n_inputs:
        raise ShapeError(f"expected (*, {net.spec.n_inputs}) input, got {X.shape}")
    return X


def _forward_cache(net: Network, X: np.ndarray):
    inputs = X if net.dropin is None else X * net.dropin.weights
    zs, acts = [], [inputs]
    a = inputs
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W + b
        zs.append(z)
        a = _softmax(z) if i == last else _act(z, net.spec.activation)
        acts.append(a)
    return zs, acts


def forward(net: Network, batch) -> np.ndarray:
    """Class probabilities, one row per input row."""
    X = _check_batch(net, batch)
    return _forward_cache(net, X)[1][-1]


def predict(net: Network, X) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return forward(net, X).argmax(axis=1)


def accuracy(net: Network, X, y) -> float:
    X = _check_batch(net, X)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ShapeError("accuracy of an empty set is undefined")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"{X.shape[0]} rows but {y.shape} labels")
    return float(np.mean(predict(net, X) == y))


def _backprop(net: Network, zs, acts, delta):
    """Push dL/dlogits back through the dense stack.

    Returns (weight grads, bias grads, dL/d(dense input)).
    """
    gw = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
        if i > 0:
            delta = delta * _act_grad(zs[i - 1], acts[i], net.spec.activation)
    return gw, gb, delta


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropin: np.ndarray | None


def loss_and_gradients(net: Network, X, y, penalty: PenaltyConfig | None = None):
    """Mean cross-entropy (plus drop-in penalties) and its parameter gradients."""
    X = _check_batch(net, X)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    zs, acts = _forward_cache(net, X)
    probs = acts[-1]
    # log-softmax from the logits keeps the loss finite when a probability underflows
    z = zs[-1] - zs[-1].max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb, d_inputs = _backprop(net, zs, acts, delta)

    g_drop = None
    if net.dropin is not None:
        g_drop = (d_inputs * X).sum(axis=0)
        if penalty is not None and penalty.active:
            loss += penalty_value(net.dropin, penalty)
            g_drop = g_drop + penalty_gradient(net.dropin, penalty)
        g_drop[~net.dropin.mask] = 0.0
    return float(loss), Gradients(gw, gb, g_drop)


def input_gradients(net: Network, X, targets) -> np.ndarray:
    """Row-wise d p_target / d x for a batch; returns an array shaped like X."""
    X = _check_batch(net, X)
    targets = np.asarray(targets, dtype=np.int64)
    n = X.shape[0]
    if targets.shape != (n,):
        raise ShapeError("one target class per row expected")
    if n and (targets.min() < 0 or targets.max() >= net.spec.n_classes):
        raise ShapeError("target class out of range")
    zs, acts = _forward_cache(net, X)
    probs = acts[-1]
    pt = probs[np.arange(n), targets]
    # d p_t / d z_k = p_t * ([k == t] - p_k)
    delta = -pt[:, None] * probs
    delta[np.arange(n), targets] += pt
    _, _, d_inputs = _backprop(net, zs, acts, delta)
    if net.dropin is not None:
        d_inputs = d_inputs * net.dropin.weights
    return d_inputs


def input_gradient(net: Network, x, target_class: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("input_gradient takes a single feature vector")
    return input_gradients(net, x[None, :], [target_class])[0]


def _sgd_step(net: Network, grads: Gradients, lr: float, mu: float):
    # buf = mu * buf + g;  p -= lr * buf
    for i in range(len(net.weights)):
        net.velocity_w[i] *= mu
        net.velocity_w[i] += grads.weights[i]
        net.weights[i] -= lr * net.velocity_w[i]
        net.velocity_b[i] *= mu
        net.velocity_b[i] += grads.biases[i]
        net.biases[i] -= lr * net.velocity_b[i]
    if net.dropin is not None:
        v = net.velocity_dropin
        v *= mu
        v += grads.dropin
        v[~net.dropin.mask] = 0.0
        net.dropin.weights -= lr * v
        net.dropin.weights[~net.dropin.mask] = 0.0


def train(net: Network, data: "SplitDataset", cfg: TrainConfig) -> TrainResult:
    """Mini-batch momentum SGD with early stopping on validation accuracy.

    The input network is not modified. Returns the checkpoint with the highest
    validation accuracy; a later epoch must beat it strictly to replace it.
    Training stops after ``cfg.patience`` epochs without such an improvement.
    """
    Xtr, ytr = data.train.X, data.train.y
    if Xtr.shape[1] != net.spec.n_inputs:
        raise ShapeError(f"data has {Xtr.shape[1]} features, network expects {net.spec.n_inputs}")
    C = net.spec.n_classes
    for part in (data.train, data.val):
        if part.y.size and (part.y.min() < 0 or part.y.max() >= C):
            raise ShapeError(f"labels must lie in [0, {C})")

    work = net.copy()
    work.reset_momentum()
    rng = np.random.default_rng(cfg.seed)
    penalty = cfg.penalty if work.dropin is not None else None
    n = Xtr.shape[0]
    bs = cfg.batch_size

    best_net, best_acc, best_epoch = None, -1.0, 0
    history: list[tuple[float, float]] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = loss_and_gradients(work, Xtr[idx], ytr[idx], penalty)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * idx.size
            _sgd_step(work, grads, cfg.learning_rate, cfg.momentum)
        if not work.is_finite():
            raise TrainingDivergedError(epoch, float("nan"))
        work.epochs_trained += 1
        val_acc = accuracy(work, data.val.X, data.val.y)
        history.append((total / n, val_acc))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_net = work.copy()
        elif epoch - best_epoch >= cfg.patience:
            break

    best_net.reset_momentum()
    return TrainResult(best_net, best_acc, best_epoch, len(history), history)
