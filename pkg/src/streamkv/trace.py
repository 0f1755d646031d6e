"""Synthetic Q/K/V streams with planted structure, and the KVTR file format.

Planted token classes, per layer and head:

* sinks: keys carry ``sink_gain`` along a shared direction ``u`` that every
  stream query contains weakly, so they draw attention from the whole stream;
* local tokens: keys align with a per-cluster direction that only the queries
  of their own ``local_cluster_size`` neighbours contain;
* answer tokens: keys align with the answer query, plus a moderate ``u``
  component (``answer_salience``) so they stay mildly salient to the stream;
* every key also carries ``scene_gain`` of its cluster direction, so
  neighbouring tokens look alike once the rotation is removed;
* every token shares a weak temporal-bias direction with every query, which
  the rotary embedding turns into a recency preference (``recency_gain``);
* white noise of ``noise_std`` on top of all of it.

The directions live in disjoint sets of rotary frequency pairs (slowest pairs
for ``u``, then the answer band, then the bias band, fastest pairs for the
clusters), so the question query is orthogonal to everything but answers
even after rotation. Keys and stream queries are emitted roped at their
stream positions; question queries are emitted raw (pre-rotary).

File layout (all little-endian)::

    header   '<4sHHIIIdIII' magic "KVTR", version, flags, layers, heads,
             head_dim, rope_theta, total_tokens, chunk_size, question_tokens
    payload  for each chunk, layer, head: Q, K, V as float32 (n, head_dim)
             (Q omitted when FLAG_NO_QUERIES)
    [FLAG_POSITIONS]     int64 (layers, total_tokens)
    [FLAG_QUESTION]      float32 (layers, heads, t, head_dim); int64 (t,)
    [FLAG_GROUND_TRUTH]  uint32 x3 counts; int64 sink, local, answer ids;
                         float32 (heads, head_dim) answer query
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import CorruptTrace, InvalidSpec, NotATrace, UnsupportedVersion
from .tensor_core import DTYPE, ModelShape, rope_apply

MAGIC = b"KVTR"
VERSION = 1
HEADER = struct.Struct("<4sHHIIIdIII")

FLAG_QUESTION = 1
FLAG_GROUND_TRUTH = 2
FLAG_POSITIONS = 4
FLAG_NO_QUERIES = 8

# Logit contributions are weight * gain; query weights are scaled by sqrt(d)
# to cancel the attention scale.
SINK_QUERY_WEIGHT = 0.5
ANSWER_GAIN = 8.0
LOCAL_GAIN = 1.0
LOCAL_QUERY_WEIGHT = 4.0


@dataclass
class TraceSpec:
    shape: ModelShape = field(default_factory=ModelShape)
    total_tokens: int = 2048
    chunk_size: int = 196
    num_sinks: int = 4
    sink_gain: float = 10.0
    local_cluster_size: int = 16
    num_answer_tokens: int = 16
    answer_query: Optional[np.ndarray] = None  # (heads, head_dim); None -> drawn from seed
    noise_std: float = 0.01
    seed: int = 0
    locals_per_cluster: int = 2
    num_question_tokens: int = 4
    answer_salience: float = 2.4
    recency_gain: float = 4.0
    scene_gain: float = 0.5

    def validate(self) -> "TraceSpec":
        s = self.shape
        if self.total_tokens < 1 or self.chunk_size < 1:
            raise InvalidSpec("total_tokens and chunk_size must be >= 1")
        if self.num_sinks < 0 or self.num_answer_tokens < 0:
            raise InvalidSpec("token counts must be >= 0")
        if self.num_sinks + self.num_answer_tokens > self.total_tokens:
            raise InvalidSpec(
                f"num_sinks + num_answer_tokens = {self.num_sinks + self.num_answer_tokens}"
                f" > total_tokens = {self.total_tokens}"
            )
        if self.num_sinks and not self.sink_gain > 1:
            raise InvalidSpec("sink_gain must be > 1")
        if self.noise_std < 0:
            raise InvalidSpec("noise_std must be >= 0")
        if self.local_cluster_size < 1 or self.locals_per_cluster < 0:
            raise InvalidSpec("local_cluster_size must be >= 1, locals_per_cluster >= 0")
        if self.locals_per_cluster > self.local_cluster_size:
            raise InvalidSpec("locals_per_cluster exceeds local_cluster_size")
        if self.num_question_tokens < 1:
            raise InvalidSpec("num_question_tokens must be >= 1")
        if s.head_dim < 8:
            raise InvalidSpec("generator needs head_dim >= 8 to separate frequency bands")
        if self.answer_query is not None and np.shape(self.answer_query) != (s.num_heads, s.head_dim):
            raise InvalidSpec(f"answer_query must have shape {(s.num_heads, s.head_dim)}")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["shape"] = asdict(self.shape)
        if self.answer_query is not None:
            d["answer_query"] = np.asarray(self.answer_query, dtype=DTYPE).tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TraceSpec":
        d = dict(d)
        d["shape"] = ModelShape(**d["shape"])
        if d.get("answer_query") is not None:
            d["answer_query"] = np.asarray(d["answer_query"], dtype=DTYPE)
        return cls(**d)


@dataclass
class GroundTruth:
    sink_ids: np.ndarray
    local_ids: np.ndarray
    answer_ids: np.ndarray
    answer_query: np.ndarray  # (heads, head_dim)


@dataclass
class Trace:
    shape: ModelShape
    chunk_size: int
    q: Optional[np.ndarray]  # (layers, heads, T, d) roped; None for key/value-only snapshots
    k: np.ndarray
    v: np.ndarray
    positions: Optional[np.ndarray] = None  # (layers, T); None -> 0..T-1 for every layer
    question: Optional[np.ndarray] = None  # (layers, heads, t, d) raw
    question_positions: Optional[np.ndarray] = None
    ground_truth: Optional[GroundTruth] = None

    @property
    def total_tokens(self) -> int:
        return int(self.k.shape[2])

    def layer_positions(self, layer: int) -> np.ndarray:
        if self.positions is None:
            return np.arange(self.total_tokens, dtype=np.int64)
        return self.positions[layer]

    def chunks(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """Yield (positions, q, k, v) per chunk; arrays are (layers, heads, n, d)."""
        if self.q is None:
            raise InvalidSpec("trace carries no queries; it cannot be streamed")
        pos = self.layer_positions(0)
        for start in range(0, self.total_tokens, self.chunk_size):
            sl = slice(start, start + self.chunk_size)
            yield pos[sl], self.q[:, :, sl], self.k[:, :, sl], self.v[:, :, sl]


def frequency_bands(head_dim: int) -> dict[str, np.ndarray]:
    """Rotary pair indices for each planted direction (pair i = dims i, i+d/2)."""
    h = head_dim // 2
    n_u, n_a, n_b = max(1, h // 16), max(1, h // 8), max(1, h // 4)
    u0 = h - n_u
    a0 = u0 - n_a
    b0 = a0 - n_b
    return {
        "sink": np.arange(u0, h),
        "answer": np.arange(a0, u0),
        "bias": np.arange(b0, a0),
        "cluster": np.arange(0, b0),
    }


def _band_direction(rng: np.random.Generator, pairs: np.ndarray, head_dim: int,
                    equal_energy: bool = False) -> np.ndarray:
    """Unit vector supported on the given rotary pairs.

    With ``equal_energy`` every pair gets the same norm and a random phase, which
    makes ``v · R(Δ) v`` a smooth average of cosines instead of a random mix.
    """
    v = np.zeros(head_dim)
    h = head_dim // 2
    if equal_energy:
        phase = rng.uniform(0, 2 * np.pi, len(pairs))
        v[pairs], v[pairs + h] = np.cos(phase), np.sin(phase)
    else:
        v[pairs] = rng.standard_normal(len(pairs))
        v[pairs + h] = rng.standard_normal(len(pairs))
    return v / np.linalg.norm(v)


def _planted_ids(spec: TraceSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = spec.total_tokens
    special = rng.permutation(T)[: spec.num_sinks + spec.num_answer_tokens]
    sinks = np.sort(special[: spec.num_sinks])
    answers = np.sort(special[spec.num_sinks:])
    taken = np.zeros(T, dtype=bool)
    taken[special] = True
    locals_ = []
    for start in range(0, T, spec.local_cluster_size):
        free = np.flatnonzero(~taken[start:start + spec.local_cluster_size]) + start
        n = min(spec.locals_per_cluster, free.size)
        if n:
            locals_.append(np.sort(rng.choice(free, size=n, replace=False)))
    local_ids = np.concatenate(locals_) if locals_ else np.zeros(0, dtype=np.int64)
    return sinks.astype(np.int64), local_ids.astype(np.int64), answers.astype(np.int64)


def generate(spec: TraceSpec) -> Trace:
    spec.validate()
    shape = spec.shape
    T, d, H = spec.total_tokens, shape.head_dim, shape.num_heads
    t_q = spec.num_question_tokens
    bands = frequency_bands(d)
    root = np.random.default_rng(np.random.SeedSequence(spec.seed))
    sinks, locals_, answers = _planted_ids(spec, root)

    if spec.answer_query is None:
        answer_query = np.stack([_band_direction(root, bands["answer"], d, equal_energy=True) for _ in range(H)])
    else:
        answer_query = np.asarray(spec.answer_query, dtype=np.float64)
    answer_dir = answer_query / np.maximum(np.linalg.norm(answer_query, axis=1, keepdims=True), 1e-30)

    positions = np.arange(T, dtype=np.int64)
    q_positions = np.arange(T, T + t_q, dtype=np.int64)
    cluster_of = positions // spec.local_cluster_size
    n_clusters = int(cluster_of[-1]) + 1
    sqrt_d = np.sqrt(d)

    Q = np.empty((shape.num_layers, H, T, d), dtype=DTYPE)
    K = np.empty_like(Q)
    V = np.empty_like(Q)
    question = np.empty((shape.num_layers, H, t_q, d), dtype=DTYPE)
    for layer in range(shape.num_layers):
        for head in range(H):
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(layer, head)))
            u = _band_direction(rng, bands["sink"], d, equal_energy=True)
            b = _band_direction(rng, bands["bias"], d, equal_energy=True)
            clusters = np.stack([_band_direction(rng, bands["cluster"], d) for _ in range(n_clusters)])
            a = answer_dir[head]

            keys = spec.noise_std * rng.standard_normal((T, d)) + b
            keys[sinks] += spec.sink_gain * u
            keys[answers] += ANSWER_GAIN * a + spec.answer_salience * u
            keys += spec.scene_gain * clusters[cluster_of]
            keys[locals_] += LOCAL_GAIN * clusters[cluster_of[locals_]]

            queries = spec.noise_std * rng.standard_normal((T, d)) + sqrt_d * (
                spec.recency_gain * b + SINK_QUERY_WEIGHT * u
                + LOCAL_QUERY_WEIGHT * clusters[cluster_of]
            )
            quest = spec.noise_std * rng.standard_normal((t_q, d)) + sqrt_d * a

            K[layer, head] = rope_apply(keys, positions, shape.rope_theta)
            Q[layer, head] = rope_apply(queries, positions, shape.rope_theta)
            V[layer, head] = rng.standard_normal((T, d))
            question[layer, head] = quest
    return Trace(
        shape=shape,
        chunk_size=spec.chunk_size,
        q=Q, k=K, v=V,
        question=question,
        question_positions=q_positions,
        ground_truth=GroundTruth(sinks, locals_, answers, answer_query.astype(DTYPE)),
    )


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _i64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def encode_trace(trace: Trace) -> bytes:
    s = trace.shape
    flags = 0
    if trace.question is not None:
        flags |= FLAG_QUESTION
    if trace.ground_truth is not None:
        flags |= FLAG_GROUND_TRUTH
    if trace.positions is not None:
        flags |= FLAG_POSITIONS
    if trace.q is None:
        flags |= FLAG_NO_QUERIES
    t_q = 0 if trace.question is None else trace.question.shape[2]
    T = trace.total_tokens
    out = [HEADER.pack(MAGIC, VERSION, flags, s.num_layers, s.num_heads, s.head_dim,
                       float(s.rope_theta), T, trace.chunk_size, t_q)]
    for start in range(0, T, trace.chunk_size):
        sl = slice(start, start + trace.chunk_size)
        for layer in range(s.num_layers):
            for head in range(s.num_heads):
                if trace.q is not None:
                    out.append(_f32(trace.q[layer, head, sl]))
                out.append(_f32(trace.k[layer, head, sl]))
                out.append(_f32(trace.v[layer, head, sl]))
    if trace.positions is not None:
        out.append(_i64(trace.positions))
    if trace.question is not None:
        out.append(_f32(trace.question))
        out.append(_i64(trace.question_positions))
    if trace.ground_truth is not None:
        gt = trace.ground_truth
        out.append(struct.pack("<III", len(gt.sink_ids), len(gt.local_ids), len(gt.answer_ids)))
        out += [_i64(gt.sink_ids), _i64(gt.local_ids), _i64(gt.answer_ids), _f32(gt.answer_query)]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.off = 0

    def take(self, n: int) -> memoryview:
        if self.off + n > len(self.buf):
            raise CorruptTrace(f"payload truncated: need {self.off + n} bytes, have {len(self.buf)}")
        view = self.buf[self.off:self.off + n]
        self.off += n
        return view

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(DTYPE).reshape(shape)

    def i64(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<i8").astype(np.int64).reshape(shape)


def decode_trace(buf: bytes) -> Trace:
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise NotATrace("missing KVTR magic")
    if len(buf) < HEADER.size:
        raise CorruptTrace("header truncated")
    magic, version, flags, L, H, d, theta, T, chunk, t_q = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}, expected {VERSION}")
    try:
        shape = ModelShape(L, H, d, theta)
    except ValueError as exc:
        raise CorruptTrace(f"bad header shape: {exc}") from exc
    if chunk < 1:
        raise CorruptTrace("chunk_size must be >= 1")
    r = _Reader(buf)
    r.off = HEADER.size
    has_q = not flags & FLAG_NO_QUERIES
    q = np.empty((L, H, T, d), dtype=DTYPE) if has_q else None
    k = np.empty((L, H, T, d), dtype=DTYPE)
    v = np.empty_like(k)
    for start in range(0, T, chunk):
        n = min(chunk, T - start)
        sl = slice(start, start + n)
        for layer in range(L):
            for head in range(H):
                if has_q:
                    q[layer, head, sl] = r.f32((n, d))
                k[layer, head, sl] = r.f32((n, d))
                v[layer, head, sl] = r.f32((n, d))
    trace = Trace(shape, chunk, q, k, v)
    if flags & FLAG_POSITIONS:
        trace.positions = r.i64((L, T))
    if flags & FLAG_QUESTION:
        trace.question = r.f32((L, H, t_q, d))
        trace.question_positions = r.i64((t_q,))
    if flags & FLAG_GROUND_TRUTH:
        ns, nl, na = struct.unpack("<III", r.take(12))
        trace.ground_truth = GroundTruth(r.i64((ns,)), r.i64((nl,)), r.i64((na,)), r.f32((H, d)))
    if r.off != len(buf):
        raise CorruptTrace(f"{len(buf) - r.off} trailing bytes after declared payload")
    return trace


def write_trace(trace: Trace, path, spec: Optional[TraceSpec] = None) -> Path:
    """Write ``path``; with ``spec`` also write a JSON sidecar next to it."""
    path = Path(path)
    path.write_bytes(encode_trace(trace))
    if spec is not None:
        sidecar_path(path).write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def read_trace(path) -> Trace:
    return decode_trace(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def snapshot_caches(caches, chunk_size: Optional[int] = None) -> Trace:
    """Pack equal-length layer caches into a key/value-only trace for debugging."""
    lengths = {len(c) for c in caches}
    if len(lengths) != 1:
        raise InvalidSpec("layer caches must have equal length to snapshot")
    n = lengths.pop()
    first = caches[0]
    shape = ModelShape(len(caches), first.num_heads, first.head_dim)
    return Trace(
        shape=shape,
        chunk_size=chunk_size or max(1, n),
        q=None,
        k=np.stack([c.keys for c in caches]),
        v=np.stack([c.values for c in caches]),
        positions=np.stack([c.positions for c in caches]),
    )
