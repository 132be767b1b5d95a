"""Small dense softmax classifiers on flat float64 parameter vectors.

Two architectures are supported: a linear softmax classifier and a
one-hidden-layer tanh network.  All parameters live in a single flat
vector with a named-slice layout so optimizers and checkpoints can treat
models as plain arrays.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SOFTMAX_LINEAR = "softmax-linear"
MLP_1HIDDEN = "mlp-1hidden"
ARCHITECTURES = (SOFTMAX_LINEAR, MLP_1HIDDEN)

LOG_CLIP = 1e-30


@dataclass
class ParamVector:
    """Flat float64 parameter vector with named block views."""

    values: np.ndarray
    layout: Dict[str, slice]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter vector must be one-dimensional")
        covered = 0
        seen = []
        for name, sl in self.layout.items():
            if sl.step not in (None, 1):
                raise ValueError(f"block {name!r} must be a contiguous slice")
            seen.append((sl.start, sl.stop, name))
            covered += sl.stop - sl.start
        seen.sort()
        pos = 0
        for start, stop, name in seen:
            if start != pos:
                raise ValueError(f"block {name!r} overlaps or leaves a gap")
            pos = stop
        if covered != self.values.size or pos != self.values.size:
            raise ValueError("layout does not cover the parameter vector exactly")

    def block(self, name: str) -> np.ndarray:
        return self.values[self.layout[name]]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout))

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass
class Model:
    arch: str
    input_dim: int
    num_classes: int
    hidden: int
    params: ParamVector

    def copy(self) -> "Model":
        return Model(self.arch, self.input_dim, self.num_classes, self.hidden,
                     self.params.copy())


def _blocks(arch: str, d: int, k: int, h: int) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for each parameter block, in storage order."""
    if arch == SOFTMAX_LINEAR:
        return [("W", (k, d), d), ("b", (k,), d)]
    return [("W1", (h, d), d), ("b1", (h,), d), ("W2", (k, h), h), ("b2", (k,), h)]


def init_model(arch: str, input_dim: int, num_classes: int, hidden: int = 0,
               seed: int = 0) -> Model:
    """Build a model with uniform [-s, s] init, s = 1/sqrt(fan_in)."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if input_dim < 1 or num_classes < 2:
        raise ValueError("need input_dim >= 1 and num_classes >= 2")
    if arch == MLP_1HIDDEN and hidden < 1:
        raise ValueError("mlp-1hidden requires hidden >= 1")
    if arch == SOFTMAX_LINEAR:
        hidden = 0
    rng = np.random.default_rng(seed)
    layout: Dict[str, slice] = {}
    chunks = []
    pos = 0
    for name, shape, fan_in in _blocks(arch, input_dim, num_classes, hidden):
        n = int(np.prod(shape))
        s = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-s, s, size=n))
        layout[name] = slice(pos, pos + n)
        pos += n
    params = ParamVector(np.concatenate(chunks), layout)
    return Model(arch, input_dim, num_classes, hidden, params)


def _weights(model: Model):
    p = model.params
    if model.arch == SOFTMAX_LINEAR:
        W = p.block("W").reshape(model.num_classes, model.input_dim)
        return W, p.block("b")
    W1 = p.block("W1").reshape(model.hidden, model.input_dim)
    W2 = p.block("W2").reshape(model.num_classes, model.hidden)
    return W1, p.block("b1"), W2, p.block("b2")


def forward_batch(model: Model, X: np.ndarray) -> np.ndarray:
    """Logits for a batch; X has shape (n, input_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(
            f"input dimension mismatch: expected (n, {model.input_dim}), got {X.shape}")
    if model.arch == SOFTMAX_LINEAR:
        W, b = _weights(model)
        return X @ W.T + b
    W1, b1, W2, b2 = _weights(model)
    H = np.tanh(X @ W1.T + b1)
    return H @ W2.T + b2


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise ValueError(
            f"input dimension mismatch: expected ({model.input_dim},), got {x.shape}")
    return forward_batch(model, x[None, :])[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_target(target: np.ndarray, k: int) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (k,):
        raise ValueError(f"target shape {t.shape} does not match {k} classes")
    if np.any(t < 0):
        raise ValueError("target distribution has negative entries")
    if abs(float(t.sum()) - 1.0) > 1e-9:
        raise ValueError(f"target distribution sums to {t.sum()!r}, not 1")
    return t


def cross_entropy(target: np.ndarray, logits: np.ndarray) -> float:
    """H(target, softmax(logits)) with max-shifted log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("logits must be a vector")
    t = _check_target(target, z.shape[0])
    return float(-np.sum(t * log_softmax(z)))


def one_hot(index: int, num_classes: int) -> np.ndarray:
    if not 0 <= index < num_classes:
        raise ValueError(f"class index {index} out of range [0, {num_classes})")
    t = np.zeros(num_classes)
    t[index] = 1.0
    return t


def _stack_batch(model: Model, batch) -> Tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    T = np.stack([_check_target(t, model.num_classes) for _, t in batch])
    if X.shape[1] != model.input_dim:
        raise ValueError(
            f"input dimension mismatch: expected {model.input_dim}, got {X.shape[1]}")
    return X, T


def batch_losses(model: Model, X: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy losses."""
    return -np.sum(T * log_softmax(forward_batch(model, X)), axis=1)


def mean_loss(model: Model, batch: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    X, T = _stack_batch(model, batch)
    return float(np.mean(batch_losses(model, X, T)))


def _mean_grad_arrays(model: Model, X: np.ndarray, T: np.ndarray) -> Tuple[float, np.ndarray]:
    n = X.shape[0]
    if model.arch == SOFTMAX_LINEAR:
        W, b = _weights(model)
        Z = X @ W.T + b
        LS = log_softmax(Z)
        loss = float(-np.sum(T * LS) / n)
        D = (np.exp(LS) - T) / n
        flat = np.concatenate([(D.T @ X).ravel(), D.sum(axis=0)])
        return loss, flat
    W1, b1, W2, b2 = _weights(model)
    H = np.tanh(X @ W1.T + b1)
    Z = H @ W2.T + b2
    LS = log_softmax(Z)
    loss = float(-np.sum(T * LS) / n)
    D = (np.exp(LS) - T) / n
    DH = (D @ W2) * (1.0 - H * H)
    flat = np.concatenate([(DH.T @ X).ravel(), DH.sum(axis=0),
                           (D.T @ H).ravel(), D.sum(axis=0)])
    return loss, flat


def loss_and_grad(model: Model,
                  batch: Sequence[Tuple[np.ndarray, np.ndarray]]
                  ) -> Tuple[float, ParamVector]:
    """Mean cross-entropy over (x, target) pairs and its gradient."""
    X, T = _stack_batch(model, batch)
    loss, flat = _mean_grad_arrays(model, X, T)
    return loss, ParamVector(flat, dict(model.params.layout))


def finite_diff_check(model: Model,
                      batch: Sequence[Tuple[np.ndarray, np.ndarray]],
                      step: float = 1e-5) -> float:
    """Worst-case discrepancy between analytic and central-difference gradients.

    Returns the max over coordinates of the relative error; when both the
    analytic and numeric values are below 1e-12 in magnitude the absolute
    error is used for that coordinate instead.
    """
    _, grad = loss_and_grad(model, batch)
    values = model.params.values
    worst = 0.0
    for i in range(values.size):
        orig = values[i]
        values[i] = orig + step
        up = mean_loss(model, batch)
        values[i] = orig - step
        down = mean_loss(model, batch)
        values[i] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = grad.values[i]
        denom = max(abs(numeric), abs(analytic))
        if denom < 1e-12:
            err = abs(numeric - analytic)
        else:
            err = abs(numeric - analytic) / denom
        worst = max(worst, err)
    return worst


def predict_batch(model: Model, X: np.ndarray) -> np.ndarray:
    """Argmax class indices; ties resolve to the lowest index."""
    return np.argmax(forward_batch(model, X), axis=1)


def error_rate(model: Model, X: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(predict_batch(model, X) != labels))
