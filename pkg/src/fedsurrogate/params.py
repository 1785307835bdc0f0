"""Flat parameter vectors with a named-layer schema, and the cosine
geometry used by every stage of the pipeline.

All arithmetic is float64; vectors are frozen after construction so they
can be shared across threads without copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

EPS_ZERO = 1e-12          # norms below this count as degenerate
ZERO_NORM_DISTANCE = 1.0  # cosine-distance fallback for degenerate pairs


class SchemaError(ValueError):
    """Layer-schema violation: unknown name, bad offsets, length mismatch."""


class Role(str, Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"


@dataclass(frozen=True)
class LayerSchema:
    """Ordered, contiguous named slices over a flat parameter array."""

    layers: tuple[tuple[str, int, int], ...]  # (name, offset, length)

    def __post_init__(self):
        if not self.layers:
            raise SchemaError("schema needs at least one layer")
        names = [n for n, _, _ in self.layers]
        if len(set(names)) != len(names):
            raise SchemaError("layer names must be unique")
        expected = 0
        for name, offset, length in self.layers:
            if length <= 0:
                raise SchemaError(f"layer {name!r} has non-positive length")
            if offset != expected:
                raise SchemaError(f"layer {name!r} is not contiguous")
            expected = offset + length

    @classmethod
    def from_lengths(cls, lengths: Sequence[tuple[str, int]]) -> "LayerSchema":
        layers, offset = [], 0
        for name, length in lengths:
            layers.append((name, offset, length))
            offset += length
        return cls(tuple(layers))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.layers)

    @property
    def total_length(self) -> int:
        _, offset, length = self.layers[-1]
        return offset + length

    def bounds(self, name: str) -> tuple[int, int]:
        for n, offset, length in self.layers:
            if n == name:
                return offset, offset + length
        raise SchemaError(f"unknown layer {name!r}")

    def mask(self, names: Sequence[str]) -> np.ndarray:
        """Boolean mask selecting the union of the given layers."""
        out = np.zeros(self.total_length, dtype=bool)
        for name in names:
            lo, hi = self.bounds(name)
            out[lo:hi] = True
        return out


def _freeze(values: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr is values and arr.flags.writeable:
        arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 parameter array tied to a LayerSchema."""

    values: np.ndarray
    schema: LayerSchema

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        if self.values.ndim != 1 or len(self.values) != self.schema.total_length:
            raise SchemaError(
                f"vector length {self.values.size} != schema length "
                f"{self.schema.total_length}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")

    def layer(self, name: str) -> np.ndarray:
        lo, hi = self.schema.bounds(name)
        return self.values[lo:hi]

    def restricted(self, names: Sequence[str]) -> np.ndarray:
        """Concatenation of the given layers, in the order given."""
        return np.concatenate([self.layer(n) for n in names])

    def replace(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.schema)


@dataclass(frozen=True)
class ClientUpdate:
    """A client's round delta plus the metadata the harness tracks.

    ``true_role`` is ground truth for metrics only; the defense never
    reads it.
    """

    client_id: int
    delta: ParameterVector
    model: ParameterVector
    sample_count: int
    true_role: Role = Role.BENIGN

    def __post_init__(self):
        if self.delta.schema is not self.model.schema and self.delta.schema != self.model.schema:
            raise SchemaError("delta and model schemas differ")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def layer_slice(v: ParameterVector, name: str) -> np.ndarray:
    """Contiguous sub-array for the named layer."""
    return v.layer(name)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]. Degenerate norms fall back to 1.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("cosine_distance needs equal-length arrays")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < EPS_ZERO or nb < EPS_ZERO:
        return ZERO_NORM_DISTANCE
    cos = float(np.dot(a, b)) / (na * nb)
    return 1.0 - max(-1.0, min(1.0, cos))


def pairwise_distance_matrix(
    vectors: Sequence[np.ndarray], metric: str = "cosine"
) -> np.ndarray:
    """Symmetric zero-diagonal matrix of pairwise distances.

    ``metric`` is "cosine" (the default) or "euclidean". Euclidean
    distances see update magnitude as well as direction, which matters
    when an attacker scales an otherwise benign-looking update.
    """
    n = len(vectors)
    if n < 2:
        raise ValueError("need at least two vectors")
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    D = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if metric == "cosine":
                d = cosine_distance(vectors[i], vectors[j])
            else:
                d = float(np.linalg.norm(vectors[i] - vectors[j]))
            D[i, j] = D[j, i] = d
    return D


def compute_update(
    model: ParameterVector,
    global_model: ParameterVector,
    client_id: int = 0,
    sample_count: int = 1,
    true_role: Role = Role.BENIGN,
) -> ClientUpdate:
    """Client delta = model - global, packaged with metadata."""
    if model.schema != global_model.schema:
        raise SchemaError("model and global schemas differ")
    delta = ParameterVector(model.values - global_model.values, model.schema)
    return ClientUpdate(client_id, delta, model, sample_count, true_role)
