"""A small multilayer perceptron over flat parameter vectors: named
layers "fc1", "fc2", ..., ReLU hidden activations, softmax cross-entropy
head, and seeded local mini-batch SGD.

Layer "fck" holds the weight matrix (dims[k-1] x dims[k], row-major)
followed by its bias. Everything is float64 and deterministic per seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .params import LayerSchema, ParameterVector


@dataclass(frozen=True)
class MlpArchitecture:
    layer_dims: tuple[int, ...]  # input, hidden..., output

    def __post_init__(self):
        if len(self.layer_dims) < 3:
            raise ValueError("need at least two weight layers (>= 3 dims)")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer dims must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def layer_names(self) -> tuple[str, ...]:
        return tuple(f"fc{k + 1}" for k in range(self.num_layers))

    def schema(self) -> LayerSchema:
        lengths = [
            (f"fc{k + 1}", self.layer_dims[k] * self.layer_dims[k + 1] + self.layer_dims[k + 1])
            for k in range(self.num_layers)
        ]
        return LayerSchema.from_lengths(lengths)

    def unpack(self, params: ParameterVector) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views per layer; weight shape (fan_in, fan_out)."""
        out = []
        for k in range(self.num_layers):
            fan_in, fan_out = self.layer_dims[k], self.layer_dims[k + 1]
            flat = params.layer(f"fc{k + 1}")
            W = flat[: fan_in * fan_out].reshape(fan_in, fan_out)
            b = flat[fan_in * fan_out:]
            out.append((W, b))
        return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("train config fields must be positive")


def init_model(arch: MlpArchitecture, seed: int) -> ParameterVector:
    """Kaiming-uniform weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), 0x1271]))
    schema = arch.schema()
    values = np.zeros(schema.total_length, dtype=np.float64)
    for k in range(arch.num_layers):
        fan_in, fan_out = arch.layer_dims[k], arch.layer_dims[k + 1]
        bound = np.sqrt(6.0 / fan_in)
        lo, _ = schema.bounds(f"fc{k + 1}")
        values[lo: lo + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
    return ParameterVector(values, schema)


def forward(
    arch: MlpArchitecture, params: ParameterVector, features: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits of shape (batch, classes) plus cached activations.

    The cache holds the input and each hidden post-activation, as needed
    by :func:`backward`.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != arch.layer_dims[0]:
        raise ValueError(f"feature dim {x.shape[1]} != input dim {arch.layer_dims[0]}")
    cache = [x]
    for k, (W, b) in enumerate(arch.unpack(params)):
        x = x @ W + b
        if k < arch.num_layers - 1:
            x = np.maximum(x, 0.0)
            cache.append(x)
    return x, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    probs = _softmax(logits)
    n = len(labels)
    return float(-np.mean(np.log(np.maximum(probs[np.arange(n), labels], 1e-300))))


def backward(
    arch: MlpArchitecture,
    params: ParameterVector,
    cache: list[np.ndarray],
    labels: np.ndarray,
) -> ParameterVector:
    """Gradient of mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= arch.num_classes:
        raise ValueError("label out of range")
    weights = arch.unpack(params)
    # recompute logits from the last hidden activation
    logits = cache[-1] @ weights[-1][0] + weights[-1][1]
    n = len(labels)
    probs = _softmax(logits)
    probs[np.arange(n), labels] -= 1.0
    delta = probs / n  # dL/dlogits

    schema = params.schema
    grad = np.zeros(schema.total_length, dtype=np.float64)
    for k in range(arch.num_layers - 1, -1, -1):
        W, _ = weights[k]
        a_prev = cache[k]
        lo, _hi = schema.bounds(f"fc{k + 1}")
        nw = W.size
        grad[lo: lo + nw] = (a_prev.T @ delta).ravel()
        grad[lo + nw: lo + nw + W.shape[1]] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ W.T) * (a_prev > 0.0)
    return ParameterVector(grad, schema)


def local_train(
    arch: MlpArchitecture,
    start: ParameterVector,
    data: Dataset,
    cfg: TrainConfig,
    extra_grad: Callable[[np.ndarray], np.ndarray] | None = None,
    post_step: Callable[[np.ndarray], np.ndarray] | None = None,
) -> ParameterVector:
    """Plain SGD: ``epochs`` passes of seeded-shuffled mini-batches.

    ``extra_grad`` maps the current flat parameter array to an additional
    gradient added at every step (used by regularised attacks);
    ``post_step`` maps the parameters after each step to a projected
    version (used by masked attacks).
    """
    if not len(data):
        raise ValueError("empty training data")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(cfg.seed), 0x7A]))
    values = start.values.copy()
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            current = ParameterVector(values, start.schema)
            _, cache = forward(arch, current, data.features[idx])
            grad = backward(arch, current, cache, data.labels[idx]).values
            if extra_grad is not None:
                grad = grad + extra_grad(values)
            values = values - cfg.learning_rate * grad
            if post_step is not None:
                values = post_step(values)
    return ParameterVector(values, start.schema)


def predict(arch: MlpArchitecture, params: ParameterVector, features: np.ndarray) -> np.ndarray:
    logits, _ = forward(arch, params, features)
    return logits.argmax(axis=1)  # argmax tie-break: lowest class index


def evaluate(arch: MlpArchitecture, params: ParameterVector, test: Dataset) -> float:
    """Top-1 accuracy on the given set."""
    if not len(test):
        raise ValueError("empty test set")
    return float(np.mean(predict(arch, params, test.features) == test.labels))
