"""Brute-force oracles and evaluation metrics.

Oracles only look at the full trace (or at a cache's stored roped keys with
exact attention); they never reuse the approximate paths they are compared
against. Pooling mirrors the engine: mean over query rows, then over heads.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyAnswerSet, EmptyCache, KTooLarge, KZero
from .kv_cache import LayerCache
from .tensor_core import attention_scores, pairwise_cosine, rope_apply, rope_remove
from .vsb import bucket_of


def pooled_attention(queries, keys, scale: bool = True) -> np.ndarray:
    """(heads, t, d) queries over (heads, L, d) keys -> length-L pooled weights."""
    w = attention_scores(queries, keys, scale=scale)
    return w.astype(np.float64).mean(axis=1).mean(axis=0)


def full_attention_importance(queries, keys, scale: bool = True, block: int = 512) -> np.ndarray:
    """Importance of every token under all-pairs attention of one layer."""
    queries = np.asarray(queries)
    total = np.zeros(keys.shape[1])
    for start in range(0, queries.shape[1], block):
        q = queries[:, start:start + block]
        total += attention_scores(q, keys, scale=scale).astype(np.float64).sum(axis=1).mean(axis=0)
    return total / queries.shape[1]


def top_ids(scores, k: int) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:k]


def oracle_answer_tokens(all_keys, question, question_positions, k: int, theta: float = 10000.0,
                         scale: bool = True, positions=None) -> list[set[int]]:
    """Per layer, the k stream positions the question attends most over the full stream.

    ``all_keys`` is the uncompressed roped key stream ``(layers, heads, T, d)``;
    ``question`` holds raw question queries ``(layers, heads, t, d)``.
    """
    all_keys = np.asarray(all_keys)
    T = all_keys.shape[2]
    if k > T:
        raise KTooLarge(f"k={k} > {T} stream tokens")
    pos = np.arange(T) if positions is None else np.asarray(positions)
    roped_q = rope_apply(question, question_positions, theta)
    out = []
    for layer in range(all_keys.shape[0]):
        scores = pooled_attention(roped_q[layer], all_keys[layer], scale)
        out.append({int(pos[i]) for i in top_ids(scores, k)})
    return out


def retention_ratio(retained: Sequence[Iterable[int]], answers: Sequence[Iterable[int]]) -> list[float]:
    ratios = []
    for kept, ans in zip(retained, answers):
        ans = set(ans)
        if not ans:
            raise EmptyAnswerSet("answer set is empty")
        ratios.append(len(set(kept) & ans) / len(ans))
    return ratios


def oracle_page_scores(question, question_positions, cache: LayerCache, C: int,
                       theta: float = 10000.0, scale: bool = True) -> np.ndarray:
    """Exact pooled attention of the roped question over the cache, summed per page."""
    if len(cache) == 0:
        raise EmptyCache("cannot score pages of an empty cache")
    roped_q = rope_apply(question, question_positions, theta)
    token = pooled_attention(roped_q, cache.keys, scale)
    L = len(cache)
    return np.add.reduceat(token, np.arange(0, L, C))


def recall(approx: Iterable[int], target: Iterable[int]) -> float:
    """Fraction of ``target`` found in ``approx``."""
    target = set(target)
    if not target:
        raise KZero("empty target set")
    return len(set(approx) & target) / len(target)


def recall_at_k(approx_topk: Iterable[int], oracle_topk: Iterable[int]) -> float:
    approx, oracle = set(approx_topk), set(oracle_topk)
    if len(oracle) == 0:
        raise KZero("k must be >= 1")
    if len(approx) != len(oracle):
        raise ValueError(f"recall@k needs equal k, got {len(approx)} and {len(oracle)}")
    return len(approx & oracle) / len(oracle)


def coverage(retained: Iterable[int], L: int, N: int) -> int:
    return len({bucket_of(i, L, N) for i in retained})


def intra_page_similarity(cache: LayerCache, C: int, deroped: bool, theta: float = 10000.0) -> float:
    """Mean pairwise cosine similarity of keys sharing a page (over heads and pages)."""
    keys = rope_remove(cache.keys, cache.positions, theta) if deroped else cache.keys
    sims = []
    for start in range(0, len(cache), C):
        page = keys[:, start:start + C]
        n = page.shape[1]
        if n < 2:
            continue
        iu = np.triu_indices(n, k=1)
        for head in range(page.shape[0]):
            sims.append(pairwise_cosine(page[head])[iu].mean())
    return float(np.mean(sims)) if sims else 0.0
