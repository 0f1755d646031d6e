"""Shared builders and the independent selection reference."""
import numpy as np

from streamkv.kv_cache import LayerCache, TokenRecord


def make_cache(n, heads=2, d=8, budget=4, seed=0, positions=None):
    rng = np.random.default_rng(seed)
    cache = LayerCache(heads, d, budget)
    pos = np.arange(n) if positions is None else np.asarray(positions)
    if n:
        cache.append_arrays(rng.standard_normal((heads, n, d)), rng.standard_normal((heads, n, d)), pos)
    return cache


def record(pos, heads=2, d=8, fill=0.0):
    return TokenRecord(np.full((heads, d), fill), np.full((heads, d), fill), pos)


def naive_two_phase(scores, M, N, B, n_phase1):
    """Literal step-by-step walk: sort, keep the head, then fill buckets."""
    L = len(scores)
    if L <= M:
        return set(range(L))
    ranked = sorted(range(L), key=lambda i: (-float(scores[i]), i))
    occupancy = [0] * N
    kept = []
    for i in ranked[:n_phase1]:
        kept.append(i)
        occupancy[i * N // L] += 1
    for i in ranked[n_phase1:]:
        if len(kept) == M:
            break
        bucket = i * N // L
        if occupancy[bucket] < B:
            occupancy[bucket] += 1
            kept.append(i)
    return set(kept)


ACCEPTANCE_LINES = []


def verdict(number, title, ok, detail=""):
    """Record and print one acceptance line, then fail the test if needed."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
