"""Position-agnostic page retrieval over a compressed cache.

Compression leaves survivors with gaps in their stream positions, so their
roped keys are rotated by unrelated angles and a page average of them mixes
incoherent directions. The index therefore strips the rotation from every
key before averaging. Question queries score the page means with one small
attention pass; the best pages plus a recent sliding window form the
response context. Retrieved tokens are handed back by reference, so they
keep their stored (roped) keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCache, ShapeMismatch, StaleIndex
from .kv_cache import LayerCache
from .tensor_core import DTYPE, OpCounter, attention_cost, attention_scores, rope_remove


@dataclass(frozen=True)
class RetrievalConfig:
    retrieval_ratio: float = 0.4
    sliding_window_tokens: int = 196
    page_size_C: int = 16
    deroped_keys: bool = True
    roped_queries: bool = False
    shared_selection: bool = False

    def __post_init__(self):
        if not 0.0 < self.retrieval_ratio <= 1.0:
            raise ValueError("retrieval_ratio must lie in (0, 1]")
        if self.page_size_C < 1:
            raise ValueError("page_size_C must be >= 1")
        if self.sliding_window_tokens < 0:
            raise ValueError("sliding_window_tokens must be >= 0")


@dataclass
class Page:
    page_id: int
    start: int  # cache index range [start, stop)
    stop: int
    mean_key: np.ndarray  # (heads, head_dim)
    first_position: int
    last_position: int

    @property
    def token_indices(self) -> range:
        return range(self.start, self.stop)


@dataclass
class PageIndex:
    pages: list[Page]
    page_size_C: int
    mean_keys: np.ndarray  # (heads, num_pages, head_dim)
    cache_version: int
    deroped: bool = True

    def __len__(self) -> int:
        return len(self.pages)

    def check_fresh(self, cache: LayerCache) -> None:
        if cache.version != self.cache_version:
            raise StaleIndex("page index was built before the last cache mutation")


@dataclass
class ResponseContext:
    indices: np.ndarray  # cache indices, ascending
    positions: np.ndarray
    keys: np.ndarray  # (heads, m, d), roped
    values: np.ndarray
    page_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def selected_page_count(num_pages: int, ratio: float) -> int:
    return max(1, int(np.floor(ratio * num_pages + 1e-9)))


def build_page_index(cache: LayerCache, C: int, theta: float = 10000.0,
                     deroped: bool = True) -> PageIndex:
    if len(cache) == 0:
        raise EmptyCache("cannot page an empty cache")
    if C < 1:
        raise ValueError("page size must be >= 1")
    keys = rope_remove(cache.keys, cache.positions, theta) if deroped else cache.keys
    L = len(cache)
    pages = []
    means = []
    for pid, start in enumerate(range(0, L, C)):
        stop = min(start + C, L)
        mean = keys[:, start:stop].astype(np.float64).mean(axis=1).astype(DTYPE)
        means.append(mean)
        pages.append(Page(pid, start, stop, mean, int(cache.positions[start]),
                          int(cache.positions[stop - 1])))
    return PageIndex(pages, C, np.stack(means, axis=1), cache.version, deroped)


def score_pages(question_queries, index: PageIndex, scale: bool = True,
                counter: Optional[OpCounter] = None) -> np.ndarray:
    """Softmax of queries over page mean keys, pooled over query rows and heads."""
    q = np.asarray(question_queries, dtype=DTYPE)
    if q.ndim == 2:
        q = q[None]
    if q.shape[1] < 1:
        raise ShapeMismatch("need at least one question query")
    if q.shape[0] != index.mean_keys.shape[0] or q.shape[-1] != index.mean_keys.shape[-1]:
        raise ShapeMismatch(f"queries {q.shape} vs mean keys {index.mean_keys.shape}")
    w = attention_scores(q, index.mean_keys, scale=scale)  # (heads, t, P)
    if counter is not None:
        counter.add("page_scoring", attention_cost(q.shape[1], len(index), q.shape[-1], q.shape[0]))
    return w.mean(axis=1).mean(axis=0).astype(np.float64)


def top_pages(scores, k: int) -> list[int]:
    """Ids of the k best pages (ties to the earlier page), in ascending id order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:k])


def retrieve(index: PageIndex, scores, ratio: float) -> list[Page]:
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    if len(scores) != len(index):
        raise ShapeMismatch(f"{len(scores)} scores for {len(index)} pages")
    k = selected_page_count(len(index), ratio)
    return [index.pages[i] for i in top_pages(scores, k)]


def window_indices(cache: LayerCache, window_tokens: int) -> np.ndarray:
    L = len(cache)
    return np.arange(max(0, L - window_tokens), L)


def assemble_context(selected: Sequence[Page], cache: LayerCache, window_tokens: int) -> ResponseContext:
    parts = [np.arange(p.start, p.stop) for p in selected]
    parts.append(window_indices(cache, window_tokens))
    # cache indices are position-ordered, so dedup on index == dedup on position
    idx = np.unique(np.concatenate(parts).astype(np.int64))
    return ResponseContext(
        indices=idx,
        positions=cache.positions[idx],
        keys=cache.keys[:, idx],
        values=cache.values[:, idx],
        page_ids=[p.page_id for p in selected],
    )
