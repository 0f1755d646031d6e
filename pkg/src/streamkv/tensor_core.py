"""Dense attention and rotary-embedding kernels.

Matrices are numpy float32 arrays. Functions accept either a single
``(rows, dim)`` matrix or a stack with leading batch axes (typically heads),
and broadcast over the leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape, NonFiniteInput, OddHeadDim, ShapeMismatch

DTYPE = np.float32


@dataclass(frozen=True)
class ModelShape:
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 64
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim"):
            if int(getattr(self, name)) < 1:
                raise InvalidShape(f"{name} must be >= 1")
        if self.head_dim % 2:
            raise OddHeadDim(f"head_dim={self.head_dim}")
        if not self.rope_theta > 0:
            raise InvalidShape("rope_theta must be positive")


def as_matrix(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def softmax_rows(logits) -> np.ndarray:
    x = as_matrix(logits)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("softmax input contains inf/nan")
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def attention_scores(queries, keys, scale: bool = True) -> np.ndarray:
    """softmax(Q Kᵀ [/ sqrt(d)]) row-wise; no causal mask."""
    q = as_matrix(queries)
    k = as_matrix(keys)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if q.shape[:-2] != k.shape[:-2]:
        raise ShapeMismatch(f"batch axes {q.shape[:-2]} != {k.shape[:-2]}")
    logits = q @ np.swapaxes(k, -1, -2)
    if scale:
        logits = logits * DTYPE(1.0 / np.sqrt(q.shape[-1]))
    return softmax_rows(logits)


def attention_cost(rows: int, cols: int, dim: int, heads: int = 1) -> int:
    """Multiply-adds for QKᵀ plus one exp per score."""
    return heads * rows * cols * (dim + 1)


class OpCounter:
    """Tallies analytic operation counts by category."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.counts[kind] = self.counts.get(kind, 0) + int(n)

    def __getitem__(self, kind: str) -> int:
        return self.counts.get(kind, 0)

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.counts.items()))


def rope_angles(positions, head_dim: int, theta: float) -> np.ndarray:
    if head_dim % 2:
        raise OddHeadDim(f"head_dim={head_dim}")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    pos = np.asarray(positions, dtype=np.float64)
    return pos[:, None] * inv_freq[None, :]


def _rotate(keys, positions, theta: float, sign: float) -> np.ndarray:
    k = np.asarray(keys, dtype=np.float64)
    d = k.shape[-1]
    if d % 2:
        raise OddHeadDim(f"head_dim={d}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or positions.shape[0] != k.shape[-2]:
        raise ShapeMismatch(f"{positions.shape[0] if positions.ndim else 0} positions for {k.shape[-2]} rows")
    ang = rope_angles(positions, d, theta)
    cos, sin = np.cos(ang), sign * np.sin(ang)
    half = d // 2
    x1, x2 = k[..., :half], k[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)
    return out.astype(DTYPE)


def rope_apply(keys, positions, theta: float = 10000.0) -> np.ndarray:
    """Rotate each row by its position (rotate-half pairing of dims i and i+d/2)."""
    return _rotate(keys, positions, theta, 1.0)


def rope_remove(keys, positions, theta: float = 10000.0) -> np.ndarray:
    return _rotate(keys, positions, theta, -1.0)


def cosine_similarity(a, b) -> float:
    """Returns 0.0 when either vector is all-zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pairwise_cosine(rows) -> np.ndarray:
    """Cosine similarity matrix of the rows of a (n, d) array; zero rows give 0."""
    x = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return x @ np.swapaxes(x, -1, -2)
