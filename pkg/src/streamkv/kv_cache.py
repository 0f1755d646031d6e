"""Per-layer KV store ordered by original stream position."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import IndexOutOfRange, PositionOrderViolation, ShapeMismatch
from .tensor_core import DTYPE


@dataclass
class TokenRecord:
    key: np.ndarray  # (heads, head_dim), roped at stream_position
    value: np.ndarray  # (heads, head_dim)
    stream_position: int
    score: float = 0.0


class LayerCache:
    """Token KV records for one layer.

    Arrays are head-major: ``keys`` and ``values`` are ``(heads, L, head_dim)``.
    Every mutation bumps ``version`` so derived indexes can detect staleness.
    """

    def __init__(self, num_heads: int, head_dim: int, budget: int):
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.budget = budget
        self.keys = np.zeros((num_heads, 0, head_dim), dtype=DTYPE)
        self.values = np.zeros((num_heads, 0, head_dim), dtype=DTYPE)
        self.positions = np.zeros(0, dtype=np.int64)
        self.scores = np.zeros(0, dtype=DTYPE)
        self.version = 0

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def max_position(self) -> int:
        return int(self.positions[-1]) if len(self) else -1

    @property
    def records(self) -> list[TokenRecord]:
        return [
            TokenRecord(self.keys[:, i].copy(), self.values[:, i].copy(), int(p), float(s))
            for i, (p, s) in enumerate(zip(self.positions, self.scores))
        ]

    def copy(self) -> "LayerCache":
        out = LayerCache(self.num_heads, self.head_dim, self.budget)
        out.keys = self.keys.copy()
        out.values = self.values.copy()
        out.positions = self.positions.copy()
        out.scores = self.scores.copy()
        out.version = self.version
        return out

    def append_arrays(self, keys, values, positions) -> "LayerCache":
        keys = np.asarray(keys, dtype=DTYPE)
        values = np.asarray(values, dtype=DTYPE)
        positions = np.asarray(positions, dtype=np.int64)
        expected = (self.num_heads, positions.shape[0], self.head_dim)
        if keys.shape != expected or values.shape != expected:
            raise ShapeMismatch(f"expected {expected}, got keys {keys.shape}, values {values.shape}")
        if positions.size == 0:
            return self
        if positions[0] <= self.max_position or np.any(np.diff(positions) <= 0):
            raise PositionOrderViolation(
                f"new positions must be strictly increasing and > {self.max_position}"
            )
        self.keys = np.concatenate([self.keys, keys], axis=1)
        self.values = np.concatenate([self.values, values], axis=1)
        self.positions = np.concatenate([self.positions, positions])
        self.scores = np.concatenate([self.scores, np.zeros(positions.shape[0], dtype=DTYPE)])
        self.version += 1
        return self

    def append(self, records: Sequence[TokenRecord]) -> "LayerCache":
        if not records:
            return self
        keys = np.stack([r.key for r in records], axis=1)
        values = np.stack([r.value for r in records], axis=1)
        positions = np.array([r.stream_position for r in records], dtype=np.int64)
        start = len(self)
        self.append_arrays(keys, values, positions)
        self.scores[start:] = [r.score for r in records]
        return self

    def retain(self, keep: Iterable[int]) -> "LayerCache":
        idx = np.unique(np.fromiter((int(i) for i in keep), dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= len(self)):
            raise IndexOutOfRange(f"indices must lie in [0, {len(self)})")
        self.keys = self.keys[:, idx]
        self.values = self.values[:, idx]
        self.positions = self.positions[idx]
        self.scores = self.scores[idx]
        self.version += 1
        return self

    def check_invariants(self) -> None:
        if np.any(np.diff(self.positions) <= 0):
            raise PositionOrderViolation("cache positions not strictly increasing")


def append_tokens(cache: LayerCache, new: Sequence[TokenRecord]) -> LayerCache:
    return cache.append(new)


def retain_indices(cache: LayerCache, keep: Iterable[int]) -> LayerCache:
    return cache.retain(keep)
