"""``streamkv`` command line: gen-trace, run, sweep and plot.

Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to
stderr only, so stdout can carry JSON or CSV.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import runner
from .engine import CompressTrigger, EngineConfig, config_with_overrides, load_config
from .errors import StreamKVError
from .par import RetrievalConfig
from .tensor_core import ModelShape
from .trace import TraceSpec, generate, read_trace, write_trace
from .vsb import VsbConfig

OUTPUT_DIR_ENV = "STREAMKV_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _kebab(name: str) -> str:
    return "--" + name.replace("_", "-").lower()


def _add_dataclass_flags(group, cls, section: str) -> None:
    for f in fields(cls):
        default = f.default
        dest = f"{section}.{f.name}"
        if isinstance(default, bool):
            group.add_argument(_kebab(f.name), dest=dest, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "num_buckets_N":
            group.add_argument(_kebab(f.name), dest=dest, type=int, default=None, metavar="N")
        else:
            kind = float if isinstance(default, float) else int
            group.add_argument(_kebab(f.name), dest=dest, type=kind, default=None)


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with [shape], [vsb], [retrieval], [engine]")
    _add_dataclass_flags(p.add_argument_group("shape (must match the trace)"), ModelShape, "shape")
    _add_dataclass_flags(p.add_argument_group("compression"), VsbConfig, "vsb")
    g = p.add_argument_group("retrieval")
    _add_dataclass_flags(g, RetrievalConfig, "retrieval")
    g.add_argument("--window", dest="retrieval.sliding_window_tokens", type=int,
                   help="alias of --sliding-window-tokens")
    e = p.add_argument_group("engine")
    e.add_argument("--compress-trigger", dest="engine.compress_trigger",
                   choices=[t.value for t in CompressTrigger])
    e.add_argument("--compress-mode", dest="engine.compress_mode", choices=["vsb", "topk"])
    p.add_argument("--question", type=Path, help=".npy raw question queries (layers, heads, t, head_dim)")
    p.add_argument("--oracle-k", type=int, help="answer-set size for retention (default: planted count)")


def _engine_config(args, trace) -> EngineConfig:
    base = EngineConfig(shape=trace.shape)
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        base = load_config(args.config, base)
    overrides: dict[str, dict] = {}
    for key, value in vars(args).items():
        if "." not in key or value is None:
            continue
        section, name = key.split(".", 1)
        overrides.setdefault(section, {})[name] = value
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("engine", {})["seed"] = args.seed[0] if isinstance(args.seed, list) else args.seed
    try:
        return config_with_overrides(base, overrides)
    except ValueError as exc:
        if isinstance(exc, StreamKVError):
            raise
        raise UsageError(str(exc)) from exc


def _output_path(path: Optional[Path], default_name: Optional[str]) -> Optional[Path]:
    out_dir = os.environ.get(OUTPUT_DIR_ENV)
    if path is None:
        if default_name is None:
            return None
        path = Path(default_name)
    if out_dir and not path.is_absolute():
        path = Path(out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)
        print(f"wrote {path}", file=sys.stderr)


def _load_question(args):
    return None if args.question is None else np.load(args.question)


def cmd_gen_trace(args) -> int:
    spec = TraceSpec(
        shape=ModelShape(args.layers, args.heads, args.head_dim, args.rope_theta),
        total_tokens=args.tokens,
        chunk_size=args.chunk_size,
        num_sinks=args.sinks,
        sink_gain=args.sink_gain,
        local_cluster_size=args.cluster_size,
        num_answer_tokens=args.answers,
        noise_std=args.noise_std,
        seed=args.seed,
        locals_per_cluster=args.locals_per_cluster,
        num_question_tokens=args.question_tokens,
        answer_salience=args.answer_salience,
        recency_gain=args.recency_gain,
        scene_gain=args.scene_gain,
    )
    path = _output_path(args.output, "trace.kvtr")
    write_trace(generate(spec), path, spec)
    print(f"wrote {path} and {path.with_suffix('.json')}", file=sys.stderr)
    return EXIT_OK


def cmd_run(args) -> int:
    trace = read_trace(args.trace)
    config = _engine_config(args, trace)
    report = runner.run_report(trace, config, trace_path=args.trace, question=_load_question(args),
                               k=args.oracle_k, timings=args.timings)
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", _output_path(args.output, None))
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.ratios:
        raise UsageError("empty ratio grid")
    for r in args.ratios:
        if not 0.0 < r <= 1.0:
            raise UsageError(f"ratio {r} outside (0, 1]")
    rows = []
    for seed in args.seed:
        if args.trace is not None:
            trace = read_trace(args.trace)
        else:
            shape = replace(ModelShape(), **{
                f.name: getattr(args, f"shape.{f.name}") for f in fields(ModelShape)
                if getattr(args, f"shape.{f.name}") is not None
            })
            spec = TraceSpec(shape=shape, total_tokens=args.tokens, seed=seed)
            trace = generate(spec)
        config = _engine_config(args, trace)
        config = replace(config, seed=seed)
        rows += runner.sweep_rows(trace, config, seed, args.ratios, _load_question(args))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _emit(buf.getvalue(), _output_path(args.output, None))
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise UsageError("plot needs matplotlib (pip install 'artifact[plot]')") from exc
    report = json.loads(args.report.read_text())
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    timeline = report["memory"]["timeline"]
    seen = [e["tokens_seen"] for e in timeline]
    ax1.plot(seen, [max(e["pre_compress"]) for e in timeline], label="before compression")
    ax1.plot(seen, [max(e["post_compress"]) for e in timeline], label="after compression")
    ax1.axhline(report["config"]["vsb"]["budget_M"], color="k", ls=":", label="budget M")
    ax1.set_xlabel("tokens seen")
    ax1.set_ylabel("cache tokens per layer")
    ax1.legend()
    curve = report["recall_curve"]
    ratios = [p["ratio"] for p in curve]
    for layer in range(len(curve[0]["recall"])):
        ax2.plot(ratios, [p["recall"][layer] for p in curve], marker="o", label=f"layer {layer}")
    ax2.set_xlabel("retrieval ratio")
    ax2.set_ylabel("page recall")
    ax2.set_ylim(0, 1.05)
    ax2.legend()
    fig.tight_layout()
    path = _output_path(args.output, args.report.with_suffix(".png").name)
    fig.savefig(path, dpi=120)
    print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streamkv", description="Bounded-memory streaming KV cache simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-trace", help="generate a synthetic planted-structure trace")
    d = TraceSpec()
    g.add_argument("-o", "--output", type=Path)
    g.add_argument("--tokens", type=int, default=d.total_tokens)
    g.add_argument("--chunk-size", type=int, default=d.chunk_size)
    g.add_argument("--sinks", type=int, default=d.num_sinks)
    g.add_argument("--sink-gain", type=float, default=d.sink_gain)
    g.add_argument("--cluster-size", type=int, default=d.local_cluster_size)
    g.add_argument("--answers", type=int, default=d.num_answer_tokens)
    g.add_argument("--noise-std", type=float, default=d.noise_std)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--layers", type=int, default=d.shape.num_layers)
    g.add_argument("--heads", type=int, default=d.shape.num_heads)
    g.add_argument("--head-dim", type=int, default=d.shape.head_dim)
    g.add_argument("--rope-theta", type=float, default=d.shape.rope_theta)
    g.add_argument("--locals-per-cluster", type=int, default=d.locals_per_cluster)
    g.add_argument("--question-tokens", type=int, default=d.num_question_tokens)
    g.add_argument("--answer-salience", type=float, default=d.answer_salience)
    g.add_argument("--recency-gain", type=float, default=d.recency_gain)
    g.add_argument("--scene-gain", type=float, default=d.scene_gain)
    g.set_defaults(func=cmd_gen_trace)

    r = sub.add_parser("run", help="stream a trace, answer its question, print a JSON report")
    r.add_argument("trace", type=Path)
    r.add_argument("-o", "--output", type=Path)
    r.add_argument("--seed", type=int)
    r.add_argument("--timings", action="store_true", help="add wall-clock timings (breaks byte-identity)")
    _add_engine_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="recall/context size over a retrieval-ratio grid, as CSV")
    s.add_argument("--trace", type=Path, help="sweep one trace file instead of generating per seed")
    s.add_argument("--seed", type=int, nargs="+", required=True)
    s.add_argument("--ratios", type=float, nargs="*", default=list(runner.DEFAULT_RATIOS))
    s.add_argument("--tokens", type=int, default=d.total_tokens)
    s.add_argument("-o", "--output", type=Path)
    _add_engine_flags(s)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="render memory timeline and recall curve from a run report")
    pl.add_argument("report", type=Path)
    pl.add_argument("-o", "--output", type=Path)
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and argparse usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"streamkv: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StreamKVError as exc:
        print(f"streamkv: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"streamkv: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
