"""Command-line entry point.

Exit codes: 0 ok, 1 invalid config or script, 2 invariant violation, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from .backends import TranscriptContext, TranscriptTurn, http_llm_retrieve, http_search_retrieve
from .config import ConfigError, RunConfig, load_packaged_prompt
from .datasynth import ScriptError, build_dataset, load_scripts, validate_dataset_record, write_dataset
from .engine import ConversationTrace, DuplexEngine, validate_trace
from .generators import ScriptedGenerator
from .metrics import export_histograms, measure_trace, write_reports
from .seeding import rng_for

log = logging.getLogger("duplexrag")

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3


def fixture_dir() -> Path:
    return Path(str(resources.files("duplexrag") / "data" / "scripts"))


def _config(args) -> RunConfig:
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    for flag, key in (("injection", "engine.injection"), ("mode", "engine.mode"),
                      ("backend", "backend.kind"), ("latency", "backend.latency.value_s"),
                      ("timeout", "backend.timeout_s")):
        value = getattr(args, flag, None)
        if value is not None:
            sets.append(f"{key}={json.dumps(value)}")
    return RunConfig.load(args.config, sets)


def _scripts(path):
    scripts = load_scripts(path or fixture_dir())
    if not scripts:
        raise ScriptError(f"{path}: no *.json scripts found")
    return scripts


def _additivity_problems(reports, tb) -> List[str]:
    out = []
    for r in reports:
        err = r.additivity_error()
        if err is not None and err > tb.frame_period_s:
            out.append(f"{r.script_id} turn {r.turn_idx}: |e2ekd - (ttfat + kd)| = {err:.6f} s")
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    scripts = _scripts(args.scripts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tb = cfg.timebase()
    tables = cfg.tables()
    engine = DuplexEngine(tables, cfg.encoder(tables), cfg.engine_config(), tb)
    tok = cfg["tokens"]
    problems: List[str] = []
    all_reports = []
    for script in scripts:
        sid = script.script_id
        gen = ScriptedGenerator(script, rng_for(cfg.seed, sid, "audio"), tb, cfg.alignment_config(),
                                num_codebooks=tok["num_codebooks"], audio_vocab=tok["audio_vocab"])
        feed = gen.user_feed()
        trace = engine.run(gen, feed, cfg.backend(sid, gen.references()))
        trace.write(out / f"{sid}.trace.jsonl")
        reports = measure_trace(trace)
        write_reports(reports, out / f"{sid}.report.jsonl")
        all_reports.extend(reports)
        if len(trace.frames) != len(feed):
            problems.append(f"{sid}: emitted {len(trace.frames)} frames for {len(feed)} input frames")
        problems += [f"{sid}: {p}" for p in validate_trace(trace)]
        problems += _additivity_problems(reports, tb)
        log.info("%s: %d frames, %d retrieval jobs", sid, len(trace.frames), len(trace.jobs))
    examples = build_dataset(scripts, cfg.seed, tb, cfg.synth_config())
    write_dataset(examples, out / "dataset.jsonl")
    for ex in examples:
        problems += [f"dataset {ex.script_id} turn {ex.turn_idx}: {p}"
                     for p in validate_dataset_record(ex.to_record())]
    try:
        export_histograms(all_reports, cfg.bins(), out / "histograms.csv")
    except ValueError as exc:
        log.warning("no histogram written: %s", exc)
    for p in problems:
        print(f"invariant violation: {p}", file=sys.stderr)
    print(f"simulated {len(scripts)} conversation(s) into {out}")
    return EXIT_INVARIANT if problems else EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    scripts = _scripts(args.scripts)
    examples = build_dataset(scripts, cfg.seed, cfg.timebase(), cfg.synth_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(examples, out)
    bad = 0
    with open(out, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            for p in validate_dataset_record(json.loads(line)):
                bad += 1
                print(f"{out}:{n}: {p}", file=sys.stderr)
    print(f"wrote {len(examples)} training examples to {out}")
    return EXIT_INVARIANT if bad else EXIT_OK


def cmd_measure(args) -> int:
    cfg = _config(args)
    paths = sorted(Path(args.traces).glob("*.trace.jsonl"))
    if not paths:
        print(f"{args.traces}: no *.trace.jsonl files", file=sys.stderr)
        return EXIT_IO
    reports = []
    problems: List[str] = []
    for p in paths:
        try:
            trace = ConversationTrace.load(p)
        except (ValueError, KeyError) as exc:
            raise ScriptError(f"{p}: unreadable trace: {exc}") from exc
        reps = measure_trace(trace)
        reports.extend(reps)
        problems += _additivity_problems(reps, trace.tb)
    write_reports(reports, args.out)
    if args.hist:
        export_histograms(reports, cfg.bins(), args.hist)
    for p in problems:
        print(f"invariant violation: {p}", file=sys.stderr)
    print(f"measured {len(reports)} turn(s) from {len(paths)} trace(s) into {args.out}")
    return EXIT_INVARIANT if problems else EXIT_OK


def cmd_bench_backend(args) -> int:
    ctx = TranscriptContext((TranscriptTurn("user", args.question, 0.0),), 0.0)
    template = load_packaged_prompt("reference_llm")
    timeout = None if args.timeout <= 0 else args.timeout
    latencies, statuses = [], {}
    for _ in range(args.n):
        t0 = time.perf_counter()
        if args.kind == "llm":
            outcome = http_llm_retrieve(args.endpoint, ctx, template, timeout)
        else:
            outcome = http_search_retrieve(args.endpoint, ctx, timeout)
        wall = time.perf_counter() - t0
        statuses[outcome.status] = statuses.get(outcome.status, 0) + 1
        if outcome.is_ok:
            latencies.append(wall)
    print(f"endpoint {args.endpoint}: {args.n} requests, " +
          ", ".join(f"{k}={v}" for k, v in sorted(statuses.items())))
    if not latencies:
        print("no successful requests", file=sys.stderr)
        return EXIT_IO
    print("percentile  latency_s")
    for q in (50, 90, 95, 99):
        print(f"p{q:<10d} {float(np.percentile(latencies, q)):.4f}")
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        trace = ConversationTrace.load(args.trace)
    except (ValueError, KeyError) as exc:
        raise ScriptError(f"{args.trace}: unreadable trace: {exc}") from exc
    print(f"{trace.meta.get('script_id', '?')}: {len(trace.frames)} frames at "
          f"{trace.tb.frame_rate_hz} Hz, {len(trace.jobs)} retrieval job(s)")
    for ev in trace.events():
        if ev["event"] == "phase" and not args.phases:
            continue
        extra = {k: v for k, v in ev.items() if k not in ("event", "frame", "t_s", "reference")}
        print(f"{ev['t_s']:8.2f}s  frame {ev['frame']:5d}  {ev['event']:<18s} "
              + " ".join(f"{k}={v}" for k, v in sorted(extra.items())))
    problems = validate_trace(trace)
    for p in problems:
        print(f"invariant violation: {p}", file=sys.stderr)
    return EXIT_INVARIANT if problems else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duplexrag", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, backend_flags=False):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="global seed (overrides config and DUPLEXRAG_SEED)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. engine.settle_s=0.4 (repeatable)")
        if backend_flags:
            p.add_argument("--injection", choices=("additive", "insertive"))
            p.add_argument("--mode", choices=("simulated", "realtime"))
            p.add_argument("--backend", choices=("oracle", "mock", "http_llm", "http_search"))
            p.add_argument("--latency", type=float, help="fixed back-end latency in seconds")
            p.add_argument("--timeout", type=float, help="back-end timeout in seconds")

    p = sub.add_parser("simulate", help="run scripted conversations through the engine")
    common(p, backend_flags=True)
    p.add_argument("--scripts", help="directory of script JSON files (default: bundled fixtures)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth-data", help="build the training dataset from scripts")
    common(p)
    p.add_argument("--scripts", help="directory of script JSON files (default: bundled fixtures)")
    p.add_argument("--out", required=True, help="dataset JSONL path")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("measure", help="delay reports from trace files")
    common(p)
    p.add_argument("--traces", required=True, help="directory of *.trace.jsonl files")
    p.add_argument("--out", required=True, help="report JSONL path")
    p.add_argument("--hist", help="also write a histogram CSV here")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("bench-backend", help="latency percentiles of an HTTP back end")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--kind", choices=("llm", "search"), default="search")
    p.add_argument("-n", "--n", type=int, default=20, help="number of requests")
    p.add_argument("--timeout", type=float, default=2.0, help="per-request timeout, 0 disables")
    p.add_argument("--question", default="What is the capital of France?")
    p.set_defaults(func=cmd_bench_backend)

    p = sub.add_parser("replay", help="print and check the event timeline of a trace")
    p.add_argument("trace")
    p.add_argument("--phases", action="store_true", help="include phase changes")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScriptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
