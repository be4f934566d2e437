"""Small fully connected ReLU networks with softmax cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ValidationError, log_softmax, softmax


class DivergenceError(FloatingPointError):
    pass


@dataclass
class MLP:
    """ReLU hidden layers followed by a linear softmax output layer.

    ``weights[k]`` has shape ``(fan_out, fan_in)``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    epochs_trained: int = 0
    final_loss: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValidationError(f"dimension mismatch: network expects {self.input_dim} inputs, got {X.shape[1]}")
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W.T + b, 0.0)
        return h @ self.weights[-1].T + self.biases[-1]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def to_dict(self):
        return {"weights": list(self.weights), "biases": list(self.biases),
                "epochs_trained": self.epochs_trained, "final_loss": self.final_loss,
                "history": np.asarray(self.history, dtype=np.float64)}

    @classmethod
    def from_dict(cls, d):
        return cls([np.asarray(w) for w in d["weights"]], [np.asarray(b) for b in d["biases"]],
                    int(d["epochs_trained"]), float(d["final_loss"]), list(np.asarray(d["history"])))


def init_mlp(sizes, rng: np.random.Generator) -> MLP:
    """He-initialized network with layer widths ``sizes`` (input first)."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def soft_targets(y, n_classes: int, smoothing: float = 0.0) -> np.ndarray:
    T = np.full((len(y), n_classes), smoothing / n_classes)
    T[np.arange(len(y)), y] += 1.0 - smoothing
    return T


def loss_and_grad(net: MLP, X, y, smoothing: float = 0.0):
    """Mean cross-entropy and its gradient, as ``(loss, grads)``.

    ``grads`` follows ``net.params()`` order: weights then biases.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    acts = [X]
    h = X
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.maximum(h @ W.T + b, 0.0)
        acts.append(h)
    Z = h @ net.weights[-1].T + net.biases[-1]
    logp = log_softmax(Z)
    T = soft_targets(y, net.n_outputs, smoothing)
    loss = -float(np.sum(T * logp)) / n

    dZ = (np.exp(logp) - T) / n
    gW = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    delta = dZ
    for k in range(len(net.weights) - 1, -1, -1):
        gW[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ net.weights[k]) * (acts[k] > 0)
    return loss, [*gW, *gb]


def train_mlp(net: MLP, X, y, epochs: int, lr: float, batch_size: int, seed: int,
              smoothing: float = 0.0, weight_decay: float = 0.0) -> MLP:
    """Adam on mini-batches with a cosine-decayed step size; updates ``net`` in place."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    params = net.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = len(X)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    t = 0
    n_weights = len(net.weights)
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            loss, grads = loss_and_grad(net, X[idx], y[idx], smoothing)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became non-finite at epoch {epoch} with step size {lr:g}")
            epoch_loss += loss * len(idx)
            step = lr * 0.5 * (1.0 + math.cos(math.pi * t / total))
            t += 1
            for k, (p, g) in enumerate(zip(params, grads)):
                if weight_decay and k < n_weights:
                    g = g + weight_decay * p
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** t)
                vhat = v[k] / (1 - b2 ** t)
                p -= step * mhat / (np.sqrt(vhat) + eps)
        net.history.append(epoch_loss / n)
    net.epochs_trained += epochs
    final, _ = loss_and_grad(net, X, y, smoothing)
    if not math.isfinite(final):
        raise DivergenceError(f"final loss is non-finite with step size {lr:g}")
    net.final_loss = final
    return net
