"""Differentiable end models with analytic gradients.

Both models expose the same surface: mean softmax cross-entropy with
log-sum-exp stabilization, gradients w.r.t. every weight and w.r.t. each
input cell (the latter feeds the pipeline backward pass), and argmax
prediction with ties resolved to the lowest class index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float((log_norm - z[np.arange(len(y)), y]).mean())
    probs = np.exp(z - log_norm[:, None])
    return loss, probs


@dataclass
class LogisticModel:
    weights: np.ndarray  # (K, c)
    bias: np.ndarray  # (K,)

    @classmethod
    def init(cls, n_features: int, n_classes: int, rng: np.random.Generator | None = None):
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes))

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def clone(self) -> "LogisticModel":
        return LogisticModel(self.weights.copy(), self.bias.copy())

    def stepped(self, grads: list[np.ndarray], lr: float) -> "LogisticModel":
        return LogisticModel(self.weights - lr * grads[0], self.bias - lr * grads[1])

    def logits(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T + self.bias

    def forward_loss(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        return _cross_entropy(self.logits(X), y)

    def loss_and_grads(self, X, y) -> tuple[float, list[np.ndarray], np.ndarray]:
        loss, probs = self.forward_loss(X, y)
        g = probs.copy()
        g[np.arange(len(y)), y] -= 1.0
        g /= len(y)
        dW = g.T @ X
        db = g.sum(axis=0)
        dX = g @ self.weights
        return loss, [dW, db], dX

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(X) == y).mean())


@dataclass
class MLPModel:
    """Two-layer perceptron: one ReLU hidden layer, default width 100."""

    w1: np.ndarray  # (H, c)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (K, H)
    b2: np.ndarray  # (K,)

    @classmethod
    def init(
        cls,
        n_features: int,
        n_classes: int,
        rng: np.random.Generator,
        hidden: int = 100,
    ):
        # symmetric-breaking uniform in +-sqrt(6 / (fan_in + fan_out))
        lim1 = math.sqrt(6.0 / (n_features + hidden))
        lim2 = math.sqrt(6.0 / (hidden + n_classes))
        return cls(
            rng.uniform(-lim1, lim1, size=(hidden, n_features)),
            np.zeros(hidden),
            rng.uniform(-lim2, lim2, size=(n_classes, hidden)),
            np.zeros(n_classes),
        )

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def clone(self) -> "MLPModel":
        return MLPModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def stepped(self, grads: list[np.ndarray], lr: float) -> "MLPModel":
        p = self.params()
        new = [p[i] - lr * grads[i] for i in range(4)]
        return MLPModel(*new)

    def logits(self, X: np.ndarray) -> np.ndarray:
        hidden = np.maximum(X @ self.w1.T + self.b1, 0.0)
        return hidden @ self.w2.T + self.b2

    def forward_loss(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        return _cross_entropy(self.logits(X), y)

    def loss_and_grads(self, X, y) -> tuple[float, list[np.ndarray], np.ndarray]:
        pre = X @ self.w1.T + self.b1
        hidden = np.maximum(pre, 0.0)
        loss, probs = _cross_entropy(hidden @ self.w2.T + self.b2, y)
        g = probs.copy()
        g[np.arange(len(y)), y] -= 1.0
        g /= len(y)
        dW2 = g.T @ hidden
        db2 = g.sum(axis=0)
        dh = (g @ self.w2) * (pre > 0.0)
        dW1 = dh.T @ X
        db1 = dh.sum(axis=0)
        dX = dh @ self.w1
        return loss, [dW1, db1, dW2, db2], dX

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(X) == y).mean())


def make_model(kind: str, n_features: int, n_classes: int, rng: np.random.Generator):
    if kind == "logreg":
        return LogisticModel.init(n_features, n_classes)
    if kind == "mlp":
        return MLPModel.init(n_features, n_classes, rng)
    raise ValueError(f"unknown model kind {kind!r}")


def grad_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def perturbed(model, grads: list[np.ndarray], scale: float):
    """model with parameters shifted by +scale * grads (used for the
    finite-difference Hessian-vector probes)."""
    return model.stepped(grads, -scale)
