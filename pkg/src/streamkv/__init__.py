"""Bounded-memory KV cache for streaming inputs: bucketed compression and
page retrieval over de-rotated keys, simulated on numpy Q/K/V traces."""
from .engine import ChunkInput, CompressTrigger, EngineConfig, QueryInput, StreamEngine
from .errors import StreamKVError
from .kv_cache import LayerCache
from .par import RetrievalConfig
from .tensor_core import ModelShape
from .trace import Trace, TraceSpec, generate, read_trace, write_trace
from .vsb import VsbConfig, topk_select, vsb_select

__version__ = "0.1.0"

__all__ = [
    "ChunkInput", "CompressTrigger", "EngineConfig", "LayerCache", "ModelShape", "QueryInput",
    "RetrievalConfig", "StreamEngine", "StreamKVError", "Trace", "TraceSpec", "VsbConfig",
    "generate", "read_trace", "topk_select", "vsb_select", "write_trace",
]
