"""Flat-parameter classifiers trained with minibatch SGD.

Two architectures share one parameter-vector representation so models can be
averaged coordinate-wise by the aggregation layer: multinomial logistic
regression, and a one-hidden-layer tanh network. Both use softmax
cross-entropy loss (natural log) with the bias folded in as a trailing
weight row.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset


class DivergedError(RuntimeError):
    """Raised when a gradient or update stops being finite."""


@dataclass(frozen=True)
class ModelParams:
    """A classifier's weights flattened into one vector.

    arch is "logistic" (length (d+1)*C) or "mlp" (length (d+1)*h + (h+1)*C).
    """

    arch: str
    n_features: int
    n_classes: int
    hidden: int | None
    w: np.ndarray

    def __post_init__(self) -> None:
        if self.arch not in ("logistic", "mlp"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch == "mlp" and (self.hidden is None or self.hidden < 1):
            raise ValueError("mlp needs hidden >= 1")
        if self.arch == "logistic" and self.hidden is not None:
            raise ValueError("logistic takes no hidden width")
        if self.w.shape != (param_count(self.arch, self.n_features, self.n_classes, self.hidden),):
            raise ValueError("weight vector length does not match the architecture")

    @property
    def signature(self) -> tuple:
        return (self.arch, self.n_features, self.n_classes, self.hidden)


def param_count(arch: str, n_features: int, n_classes: int, hidden: int | None = None) -> int:
    if arch == "logistic":
        return (n_features + 1) * n_classes
    if arch == "mlp":
        if hidden is None or hidden < 1:
            raise ValueError("mlp needs hidden >= 1")
        return (n_features + 1) * hidden + (hidden + 1) * n_classes
    raise ValueError(f"unknown architecture {arch!r}")


def init_model(arch: str, n_features: int, n_classes: int, seed: int,
               hidden: int | None = None) -> ModelParams:
    """Uniform [-0.1, 0.1] initialization; identical for identical seeds."""
    n = param_count(arch, n_features, n_classes, hidden)
    w = np.random.default_rng(seed).uniform(-0.1, 0.1, size=n)
    return ModelParams(arch, n_features, n_classes, hidden if arch == "mlp" else None, w)


@dataclass(frozen=True)
class LossReport:
    """Mean cross-entropy and the exact fraction of correct predictions."""

    loss: float
    accuracy: float

    def __post_init__(self) -> None:
        if self.loss < 0 or not (0.0 <= self.accuracy <= 1.0):
            raise ValueError("loss must be >= 0 and accuracy in [0, 1]")


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones((len(X), 1))], axis=1)


def _logits(m: ModelParams, X: np.ndarray):
    """Return (logits, hidden activations or None)."""
    Xb = _with_bias(X)
    if m.arch == "logistic":
        W = m.w.reshape(m.n_features + 1, m.n_classes)
        return Xb @ W, None
    h = m.hidden
    W1 = m.w[: (m.n_features + 1) * h].reshape(m.n_features + 1, h)
    W2 = m.w[(m.n_features + 1) * h:].reshape(h + 1, m.n_classes)
    A = np.tanh(Xb @ W1)
    return _with_bias(A) @ W2, A


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _mean_loss(Z: np.ndarray, y: np.ndarray) -> float:
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(y)), y]))


def _check_batch(m: ModelParams, batch: Dataset) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.n_features != m.n_features or batch.n_classes != m.n_classes:
        raise ValueError("batch shape does not match the model")


def full_gradient(m: ModelParams, data: Dataset) -> np.ndarray:
    """Mean cross-entropy gradient over every sample in ``data``."""
    _check_batch(m, data)
    Xb = _with_bias(data.X)
    Z, A = _logits(m, data.X)
    P = _softmax(Z)
    P[np.arange(len(data)), data.y] -= 1.0
    dZ = P / len(data)
    if m.arch == "logistic":
        grad = (Xb.T @ dZ).ravel()
    else:
        h = m.hidden
        W2 = m.w[(m.n_features + 1) * h:].reshape(h + 1, m.n_classes)
        Ab = _with_bias(A)
        gW2 = Ab.T @ dZ
        dA = (dZ @ W2[:h].T) * (1.0 - A ** 2)
        gW1 = Xb.T @ dA
        grad = np.concatenate([gW1.ravel(), gW2.ravel()])
    if not np.all(np.isfinite(grad)):
        raise DivergedError("non-finite gradient")
    return grad


def local_update(m: ModelParams, batch: Dataset, eta: float) -> ModelParams:
    """One SGD step: w <- w - eta * mean batch gradient."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return replace(m, w=m.w - eta * full_gradient(m, batch))


def local_epochs(m: ModelParams, data: Dataset, n_epochs: int, batch_size: int,
                 eta: float, rng: np.random.Generator) -> ModelParams:
    """``n_epochs`` shuffled passes of minibatch SGD; last short batch kept."""
    if n_epochs < 1 or batch_size < 1:
        raise ValueError("need n_epochs >= 1 and batch_size >= 1")
    _check_batch(m, data)
    for _ in range(n_epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            m = local_update(m, data.subset(order[start:start + batch_size]), eta)
    return m


def evaluate(m: ModelParams, test: Dataset) -> LossReport:
    """Mean loss and argmax accuracy over ``test``."""
    _check_batch(m, test)
    Z, _ = _logits(m, test.X)
    predictions = Z.argmax(axis=1)
    return LossReport(_mean_loss(Z, test.y), float(np.mean(predictions == test.y)))
