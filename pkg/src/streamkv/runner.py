"""Drive a trace through the engine and assemble machine-readable reports."""
from __future__ import annotations

import hashlib
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics, par
from .engine import ChunkInput, EngineConfig, QueryInput, StreamEngine
from .errors import CorruptTrace, MemoryBoundViolation, ShapeMismatch
from .trace import Trace

REPORT_SCHEMA_VERSION = 1
SWEEP_SCHEMA_VERSION = 1
DEFAULT_RATIOS = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_ORACLE_K = 16


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stream(trace: Trace, config: EngineConfig, timeline: Optional[list] = None,
           coverage: Optional[list] = None) -> StreamEngine:
    """Ingest every chunk, checking the memory bound after each one.

    ``timeline`` collects one entry per chunk; ``coverage`` collects, per
    compression round, the bucket coverage of the survivors in each layer.
    """
    if trace.shape != config.shape:
        raise ShapeMismatch(f"trace shape {trace.shape} differs from config shape {config.shape}")
    config.validate(trace.chunk_size)
    engine = StreamEngine(config)
    M = config.vsb.budget_M
    N = config.vsb.num_buckets
    for pos, q, k, v in trace.chunks():
        before = [c.positions for c in engine.caches]
        rounds = engine.compression_rounds
        engine.ingest_chunk(ChunkInput(pos, q, k, v))
        pre = list(engine.pre_compress_lengths)
        post = [len(c) for c in engine.caches]
        if max(pre) > M + trace.chunk_size:
            raise MemoryBoundViolation(f"cache grew to {max(pre)} > M + chunk = {M + trace.chunk_size}")
        compressed = engine.compression_rounds > rounds
        if compressed and max(post) > M:
            raise MemoryBoundViolation(f"cache holds {max(post)} > M = {M} after compression")
        if timeline is not None:
            timeline.append({
                "tokens_seen": engine.total_tokens_seen,
                "pre_compress": pre,
                "post_compress": post,
                "compressed": compressed,
            })
        if coverage is not None and compressed and max(pre) > M:
            row = []
            for old, cache in zip(before, engine.caches):
                full = np.concatenate([old, np.asarray(pos, dtype=np.int64)])
                kept = np.searchsorted(full, cache.positions)
                row.append(metrics.coverage(kept.tolist(), len(full), N))
            coverage.append(row)
    return engine


def question_of(trace: Trace, question: Optional[np.ndarray] = None) -> QueryInput:
    if question is None:
        if trace.question is None:
            raise CorruptTrace("trace has no embedded question; supply one explicitly")
        return QueryInput(trace.question, trace.question_positions)
    q = np.asarray(question, dtype=np.float32)
    s = trace.shape
    if q.ndim != 4 or q.shape[:2] != (s.num_layers, s.num_heads) or q.shape[3] != s.head_dim:
        raise ShapeMismatch(f"question has shape {q.shape}")
    t = q.shape[2]
    return QueryInput(q, np.arange(trace.total_tokens, trace.total_tokens + t, dtype=np.int64))


def oracle_pages(engine: StreamEngine, query: QueryInput, ratio: float) -> list[list[int]]:
    """Per layer, the exact top pages at ``ratio`` over the compressed cache."""
    cfg = engine.config
    out = []
    for layer, cache in enumerate(engine.caches):
        scores = metrics.oracle_page_scores(query.queries[layer], query.positions, cache,
                                            cfg.retrieval.page_size_C, cfg.shape.rope_theta, cfg.vsb.scale)
        out.append(par.top_pages(scores, par.selected_page_count(len(scores), ratio)))
    return out


def recall_curve(engine: StreamEngine, query: QueryInput, ratios: Sequence[float]) -> list[dict]:
    """Recall of retrieved pages against the exact top pages at the configured ratio.

    The target stays fixed across the grid, so the curve is monotone and hits
    1.0 once every page is retrieved.
    """
    target = oracle_pages(engine, query, engine.config.retrieval.retrieval_ratio)
    points = []
    for ratio in ratios:
        rc = replace(engine.config.retrieval, retrieval_ratio=float(ratio))
        result = engine.answer_query(query, rc)
        per_layer = [metrics.recall(resp.selected_pages, tgt) for resp, tgt in zip(result.layers, target)]
        points.append({
            "ratio": float(ratio),
            "recall": per_layer,
            "context_sizes": result.stats["context_sizes"],
            "pages_selected": [len(r.selected_pages) for r in result.layers],
        })
    return points


def retention(engine: StreamEngine, trace: Trace, query: QueryInput, k: int) -> list[float]:
    answers = metrics.oracle_answer_tokens(trace.k, query.queries, query.positions, k,
                                           trace.shape.rope_theta, engine.config.vsb.scale,
                                           trace.layer_positions(0))
    return metrics.retention_ratio([set(c.positions.tolist()) for c in engine.caches], answers)


def oracle_k(trace: Trace, k: Optional[int]) -> int:
    if k is not None:
        return k
    if trace.ground_truth is not None and len(trace.ground_truth.answer_ids):
        return len(trace.ground_truth.answer_ids)
    return DEFAULT_ORACLE_K


def run_report(trace: Trace, config: EngineConfig, *, trace_path=None, question=None,
               k: Optional[int] = None, ratios: Sequence[float] = DEFAULT_RATIOS,
               timings: bool = False) -> dict:
    """Full encode/respond run; everything but optional timings is deterministic."""
    t0 = time.perf_counter()
    timeline: list = []
    coverage: list = []
    engine = stream(trace, config, timeline, coverage)
    t1 = time.perf_counter()
    query = question_of(trace, question)
    result = engine.answer_query(query)
    t2 = time.perf_counter()
    k = oracle_k(trace, k)
    s = config.shape
    L_last = max(e["pre_compress"][0] for e in timeline) if timeline else 0
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": config.seed,
        "config": config.to_json(),
        "trace": {
            "path": None if trace_path is None else str(trace_path),
            "sha256": None if trace_path is None else file_digest(trace_path),
            "total_tokens": trace.total_tokens,
            "chunk_size": trace.chunk_size,
        },
        "compression_rounds": engine.compression_rounds,
        "retention": {"oracle_k": k, "per_layer": retention(engine, trace, query, k)},
        "coverage": {
            "num_buckets": config.vsb.num_buckets,
            "per_round": coverage,
            "mean_per_layer": np.mean(coverage, axis=0).tolist() if coverage else [],
        },
        "recall_curve": recall_curve(engine, query, ratios),
        "response": {
            "context_sizes": result.stats["context_sizes"],
            "cache_sizes": result.stats["cache_sizes"],
            "selected_pages": [r.selected_pages for r in result.layers],
        },
        "memory": {"timeline": timeline, "final": engine.memory_report()},
        "op_counts": {
            "compression": engine.counter.as_dict(),
            "query": result.stats["op_counts"],
            "query_quadratic_reference": result.stats["quadratic_reference"],
            "peak_cache_tokens": L_last,
            "head_dim": s.head_dim,
        },
    }
    if timings:
        report["timings_s"] = {"encode": t1 - t0, "respond": t2 - t1}
    return report


def sweep_rows(trace: Trace, config: EngineConfig, seed: int, ratios: Sequence[float],
               question=None) -> list[dict]:
    """One row per ratio: recall, context size and coverage, averaged over layers."""
    if not ratios:
        raise ValueError("empty ratio grid")
    coverage: list = []
    engine = stream(trace, config, coverage=coverage)
    query = question_of(trace, question)
    cov = float(np.mean(coverage)) / config.vsb.num_buckets if coverage else 1.0
    rows = []
    for point in recall_curve(engine, query, ratios):
        cache = float(np.mean([len(c) for c in engine.caches]))
        ctx = float(np.mean(point["context_sizes"]))
        rows.append({
            "schema_version": SWEEP_SCHEMA_VERSION,
            "seed": seed,
            "parameter": "retrieval_ratio",
            "value": point["ratio"],
            "recall": float(np.mean(point["recall"])),
            "context_size": ctx,
            "cache_fraction": ctx / cache,
            "bucket_coverage": cov,
        })
    return rows
