"""Vision Sink Bucketing compression and the TopK baseline.

Importance comes from an observation window: the last ``r`` queries attend
over every cached key, and the resulting rows are mean-pooled over the
window and over heads. Selection then runs in two phases:

1. the top ``round(R * M)`` tokens are kept unconditionally;
2. the rest are visited in descending score order and kept only while the
   bucket they fall in (an equal-width slice of the current cache order)
   holds fewer than ``B`` survivors, until ``M`` tokens are kept.

Phase 1 may overfill a bucket; phase 2 never adds to a full one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigInconsistent, ShapeMismatch, WindowTooLarge
from .kv_cache import LayerCache
from .tensor_core import OpCounter, attention_cost, attention_scores


@dataclass(frozen=True)
class VsbConfig:
    budget_M: int = 12000
    num_buckets_N: Optional[int] = None  # None -> budget_M // bucket_capacity_B
    bucket_capacity_B: int = 1
    window_r: int = 64
    phase1_ratio_R: float = 0.5
    scale: bool = True

    @property
    def num_buckets(self) -> int:
        if self.num_buckets_N is None:
            return self.budget_M // self.bucket_capacity_B
        return self.num_buckets_N

    @property
    def phase1_count(self) -> int:
        # round half up
        return int(np.floor(self.phase1_ratio_R * self.budget_M + 0.5))

    def validate(self) -> "VsbConfig":
        if self.budget_M < 1 or self.bucket_capacity_B < 1 or self.num_buckets < 1:
            raise ConfigInconsistent("budget, buckets and capacity must be >= 1")
        if self.num_buckets * self.bucket_capacity_B != self.budget_M:
            raise ConfigInconsistent(
                f"N*B = {self.num_buckets}*{self.bucket_capacity_B} != M = {self.budget_M}"
            )
        if self.window_r < 1:
            raise ConfigInconsistent("window_r must be >= 1")
        if not 0.0 <= self.phase1_ratio_R <= 1.0:
            raise ConfigInconsistent("phase1_ratio_R must lie in [0, 1]")
        return self


def window_importance(cache_keys, window_queries, scale: bool = True,
                      counter: Optional[OpCounter] = None) -> np.ndarray:
    """Pooled attention each cached key receives from the window queries.

    ``cache_keys`` is ``(heads, L, d)``, ``window_queries`` is ``(heads, r, d)``.
    Returns a length-L float32 vector.
    """
    keys = np.asarray(cache_keys)
    queries = np.asarray(window_queries)
    if keys.ndim == 2:
        keys, queries = keys[None], queries[None]
    if keys.shape[0] != queries.shape[0] or keys.shape[-1] != queries.shape[-1]:
        raise ShapeMismatch(f"keys {keys.shape} vs window queries {queries.shape}")
    heads, L, d = keys.shape
    r = queries.shape[1]
    if r > L:
        raise WindowTooLarge(f"window r={r} exceeds cache length L={L}")
    w = attention_scores(queries, keys, scale=scale)  # (heads, r, L)
    if counter is not None:
        counter.add("window_scoring", attention_cost(r, L, d, heads))
    return w.mean(axis=1).mean(axis=0).astype(np.float32)


def window_scoring_cost(r: int, L: int, head_dim: int, heads: int = 1) -> int:
    return attention_cost(r, L, head_dim, heads)


def full_attention_cost(L: int, head_dim: int, heads: int = 1) -> int:
    return attention_cost(L, L, head_dim, heads)


def bucket_of(cache_index, L: int, N: int):
    """Equal-width bucket of a cache index; works on scalars and arrays."""
    if isinstance(cache_index, np.ndarray):
        return (cache_index.astype(np.int64) * N) // L
    return (int(cache_index) * N) // L


def _descending(scores: np.ndarray) -> np.ndarray:
    # stable: equal scores keep ascending index (older first)
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def topk_select(scores, M: int) -> set[int]:
    scores = np.asarray(scores)
    if M >= scores.shape[0]:
        return set(range(scores.shape[0]))
    return set(int(i) for i in _descending(scores)[:M])


def vsb_select(scores, config: VsbConfig) -> set[int]:
    config.validate()
    scores = np.asarray(scores)
    L = scores.shape[0]
    M = config.budget_M
    if L <= M:
        return set(range(L))
    N, B = config.num_buckets, config.bucket_capacity_B
    order = _descending(scores)
    buckets = bucket_of(order, L, N)
    occupancy = np.zeros(N, dtype=np.int64)

    n1 = min(config.phase1_count, M)
    kept = [int(i) for i in order[:n1]]
    np.add.at(occupancy, buckets[:n1], 1)

    for idx, b in zip(order[n1:], buckets[n1:]):
        if len(kept) >= M:
            break
        if occupancy[b] < B:
            occupancy[b] += 1
            kept.append(int(idx))
    return set(kept)


def compress(cache: LayerCache, window_queries, config: VsbConfig, mode: str = "vsb",
             counter: Optional[OpCounter] = None) -> LayerCache:
    """Shrink ``cache`` to the budget in place; no-op when it already fits."""
    if len(cache) <= config.budget_M:
        return cache
    scores = window_importance(cache.keys, window_queries, scale=config.scale, counter=counter)
    if mode == "vsb":
        keep = vsb_select(scores, config)
    elif mode == "topk":
        keep = topk_select(scores, config.budget_M)
    else:
        raise ValueError(f"unknown compression mode {mode!r}")
    cache.scores = scores
    return cache.retain(keep)
