"""Streaming engine: encoding phase (ingest + compress) and response phase."""
from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import par, vsb
from .errors import ConfigInconsistent, EmptyCache, MemoryBoundViolation, PositionOrderViolation, ShapeMismatch
from .kv_cache import LayerCache
from .tensor_core import DTYPE, ModelShape, OpCounter, attention_cost, rope_apply


class CompressTrigger(str, enum.Enum):
    AFTER_EACH_CHUNK = "after_each_chunk"
    ON_BUDGET_EXCEEDED = "on_budget_exceeded"


@dataclass(frozen=True)
class EngineConfig:
    shape: ModelShape = field(default_factory=ModelShape)
    vsb: vsb.VsbConfig = field(default_factory=vsb.VsbConfig)
    retrieval: par.RetrievalConfig = field(default_factory=par.RetrievalConfig)
    compress_trigger: CompressTrigger = CompressTrigger.ON_BUDGET_EXCEEDED
    compress_mode: str = "vsb"
    seed: int = 0

    def validate(self, chunk_size: Optional[int] = None) -> "EngineConfig":
        self.vsb.validate()
        if self.compress_mode not in ("vsb", "topk"):
            raise ConfigInconsistent(f"compress_mode must be vsb or topk, got {self.compress_mode!r}")
        if chunk_size is not None and self.vsb.budget_M < chunk_size:
            raise ConfigInconsistent(f"budget {self.vsb.budget_M} smaller than one chunk ({chunk_size})")
        return self

    def to_json(self) -> dict:
        return {
            "shape": _dc_dict(self.shape),
            "vsb": _dc_dict(self.vsb),
            "retrieval": _dc_dict(self.retrieval),
            "compress_trigger": self.compress_trigger.value,
            "compress_mode": self.compress_mode,
            "seed": self.seed,
        }


def _dc_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _coerce(value: str, like):
    text = value.strip().lower()
    if isinstance(like, bool):
        return text in ("1", "true", "yes", "on")
    if like is None and text in ("", "none"):
        return None
    try:
        return float(value) if isinstance(like, float) else int(value)
    except ValueError as exc:
        raise ConfigInconsistent(f"bad value {value!r}") from exc


_SECTION_TYPES = {"shape": ModelShape, "vsb": vsb.VsbConfig, "retrieval": par.RetrievalConfig}


def config_with_overrides(config: EngineConfig, overrides: dict[str, dict]) -> EngineConfig:
    """Apply ``{section: {field: value}}`` overrides; section "engine" holds top-level fields."""
    parts = {}
    for section, cls in _SECTION_TYPES.items():
        values = overrides.get(section) or {}
        if values:
            parts[section] = replace(getattr(config, section), **values)
    top = dict(overrides.get("engine") or {})
    if "compress_trigger" in top:
        top["compress_trigger"] = CompressTrigger(top["compress_trigger"])
    return replace(config, **parts, **top)


def load_config(path, base: Optional[EngineConfig] = None) -> EngineConfig:
    """Read an INI file with [shape], [vsb], [retrieval] and [engine] sections."""
    base = base or EngineConfig()
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    overrides: dict[str, dict] = {}
    for section in parser.sections():
        if section == "engine":
            defaults = {"compress_trigger": "", "compress_mode": "", "seed": 0}
            vals = {}
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ConfigInconsistent(f"unknown key [engine] {key}")
                vals[key] = int(raw) if key == "seed" else raw.strip()
            overrides["engine"] = vals
        elif section in _SECTION_TYPES:
            current = getattr(base, section)
            # configparser lowercases keys; field names like budget_M are not
            names = {f.name.lower(): f.name for f in fields(current)}
            vals = {}
            for key, raw in parser.items(section):
                if key not in names:
                    raise ConfigInconsistent(f"unknown key [{section}] {key}")
                vals[names[key]] = _coerce(raw, getattr(current, names[key]))
            overrides[section] = vals
        else:
            raise ConfigInconsistent(f"unknown config section [{section}]")
    return config_with_overrides(base, overrides)


def dump_config(config: EngineConfig) -> str:
    parser = configparser.ConfigParser()
    for section in _SECTION_TYPES:
        parser[section] = {k: str(v) for k, v in _dc_dict(getattr(config, section)).items()}
    parser["engine"] = {
        "compress_trigger": config.compress_trigger.value,
        "compress_mode": config.compress_mode,
        "seed": str(config.seed),
    }
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


@dataclass
class ChunkInput:
    positions: np.ndarray  # (n,)
    q: np.ndarray  # (layers, heads, n, d), roped
    k: np.ndarray
    v: np.ndarray


@dataclass
class QueryInput:
    queries: np.ndarray  # (layers, heads, t, d), raw (pre-rotary)
    positions: np.ndarray  # (t,) stream positions of the question tokens

    def roped(self, theta: float) -> np.ndarray:
        return rope_apply(self.queries, self.positions, theta)


@dataclass
class LayerResponse:
    context: par.ResponseContext
    page_scores: np.ndarray
    selected_pages: list[int]
    num_pages: int


@dataclass
class QueryResult:
    layers: list[LayerResponse]
    stats: dict


class StreamEngine:
    """Holds per-layer caches and the rolling observation window."""

    def __init__(self, config: EngineConfig):
        self.config = config.validate()
        s = config.shape
        self.caches = [LayerCache(s.num_heads, s.head_dim, config.vsb.budget_M) for _ in range(s.num_layers)]
        self.window = np.zeros((s.num_layers, s.num_heads, 0, s.head_dim), dtype=DTYPE)
        self.total_tokens_seen = 0
        self.compression_rounds = 0
        self.counter = OpCounter()
        self._indexes: list[Optional[par.PageIndex]] = [None] * s.num_layers
        self.pre_compress_lengths = [0] * s.num_layers

    def ingest_chunk(self, chunk: ChunkInput) -> "StreamEngine":
        s = self.config.shape
        positions = np.asarray(chunk.positions, dtype=np.int64)
        n = positions.shape[0]
        expected = (s.num_layers, s.num_heads, n, s.head_dim)
        for name in ("q", "k", "v"):
            if np.shape(getattr(chunk, name)) != expected:
                raise ShapeMismatch(f"chunk.{name} has shape {np.shape(getattr(chunk, name))}, expected {expected}")
        if n == 0:
            return self
        if positions[0] < self.total_tokens_seen or np.any(np.diff(positions) <= 0):
            raise PositionOrderViolation(
                f"chunk positions must increase and continue the stream (seen {self.total_tokens_seen})"
            )
        for layer, cache in enumerate(self.caches):
            cache.append_arrays(chunk.k[layer], chunk.v[layer], positions)
        r = self.config.vsb.window_r
        self.window = np.concatenate([self.window, np.asarray(chunk.q, dtype=DTYPE)], axis=2)[:, :, -r:]
        self.total_tokens_seen = int(positions[-1]) + 1
        self.pre_compress_lengths = [len(c) for c in self.caches]

        M = self.config.vsb.budget_M
        every_chunk = self.config.compress_trigger == CompressTrigger.AFTER_EACH_CHUNK
        if every_chunk or any(len(c) > M for c in self.caches):
            # an under-budget round is a counted no-op
            self._compress_all()
        return self

    def _compress_all(self) -> None:
        cfg = self.config
        for layer, cache in enumerate(self.caches):
            window = self.window[layer]
            if window.shape[1] > len(cache):
                window = window[:, -len(cache):]
            vsb.compress(cache, window, cfg.vsb, mode=cfg.compress_mode, counter=self.counter)
        self.compression_rounds += 1
        self._indexes = [None] * len(self.caches)
        lengths = {len(c) for c in self.caches}
        if len(lengths) != 1 or lengths.pop() > cfg.vsb.budget_M:
            raise MemoryBoundViolation(f"layer lengths after compression: {[len(c) for c in self.caches]}")

    def page_index(self, layer: int) -> par.PageIndex:
        idx = self._indexes[layer]
        cache = self.caches[layer]
        rc = self.config.retrieval
        if idx is None or idx.cache_version != cache.version:
            idx = par.build_page_index(cache, rc.page_size_C, self.config.shape.rope_theta, rc.deroped_keys)
            self._indexes[layer] = idx
        return idx

    def answer_query(self, query: QueryInput, retrieval: Optional[par.RetrievalConfig] = None) -> QueryResult:
        """Retrieve per-layer contexts for a question; caches are left untouched."""
        rc = retrieval or self.config.retrieval
        if not self.caches or len(self.caches[0]) == 0:
            raise EmptyCache("no tokens ingested yet")
        s = self.config.shape
        q = query.roped(s.rope_theta) if rc.roped_queries else np.asarray(query.queries, dtype=DTYPE)
        t = q.shape[2]
        counter = OpCounter()
        layer_scores = []
        indexes = []
        for layer, cache in enumerate(self.caches):
            if rc == self.config.retrieval:
                index = self.page_index(layer)
            else:
                index = par.build_page_index(cache, rc.page_size_C, s.rope_theta, rc.deroped_keys)
            indexes.append(index)
            layer_scores.append(par.score_pages(q[layer], index, scale=self.config.vsb.scale, counter=counter))
        if rc.shared_selection:
            pooled = np.mean(layer_scores, axis=0)
            layer_scores = [pooled] * len(layer_scores)

        responses = []
        for layer, cache in enumerate(self.caches):
            selected = par.retrieve(indexes[layer], layer_scores[layer], rc.retrieval_ratio)
            ctx = par.assemble_context(selected, cache, rc.sliding_window_tokens)
            counter.add("response_attention", attention_cost(t, len(ctx), s.head_dim, s.num_heads))
            responses.append(LayerResponse(ctx, layer_scores[layer], [p.page_id for p in selected], len(indexes[layer])))
        stats = {
            "context_sizes": [len(r.context) for r in responses],
            "cache_sizes": [len(c) for c in self.caches],
            "op_counts": counter.as_dict(),
            "quadratic_reference": sum(
                attention_cost(len(r.context) + t, len(r.context) + t, s.head_dim, s.num_heads) for r in responses
            ),
        }
        return QueryResult(responses, stats)

    def memory_report(self) -> dict:
        s = self.config.shape
        tokens = [len(c) for c in self.caches]
        per_token = s.num_heads * s.head_dim * 2 * 4
        return {
            "tokens": tokens,
            "bytes": [n * per_token for n in tokens],
            "total_bytes": sum(tokens) * per_token,
        }
