"""Command-line front end: synth, index, search, bench, report.

Exit codes: 0 success, 1 usage error, 2 data error.  Structured output goes
to stdout (or --out), diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

from .archive import ArchiveError, SynthSpec, generate_synthetic_archive, load_manifest
from .bench import BenchError, build_report, emit_report, run_leave_one_out
from .encoding import EncodingError
from .index import QueryError, save_index, storage_report
from .mosaic import MosaicError
from .ranking import trace_writer
from .search import ENGINE_NAMES, Engine, SearchError, engine_config

DATA_ERRORS = (ArchiveError, BenchError, EncodingError, MosaicError, QueryError, SearchError, OSError,
               json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_engine_args(p, multiple=False):
    p.add_argument("--archive", required=True, help="archive directory or manifest.json")
    if multiple:
        p.add_argument("--engine", action="append", choices=ENGINE_NAMES,
                       help="engine to run (repeatable; default: all)")
    else:
        p.add_argument("--engine", required=True, choices=ENGINE_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wsisearch", description="WSI search engine benchmark toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic archive")
    d = SynthSpec()
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=d.num_classes)
    p.add_argument("--wsis-per-class", type=int, default=d.wsis_per_class)
    p.add_argument("--patients-per-class", type=int, default=None,
                   help="default: a third of --wsis-per-class (at least 1)")
    p.add_argument("--grid", type=int, nargs=2, metavar=("W", "H"), default=(d.grid_w, d.grid_h))
    p.add_argument("--dim", type=int, default=d.feature_dim)
    p.add_argument("--separation", type=float, default=d.class_separation)
    p.add_argument("--noise", type=float, default=d.noise_sigma)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("index", help="build and save an engine's index")
    _add_engine_args(p)
    p.add_argument("--out", required=True, help="index file to write")

    p = sub.add_parser("search", help="query one WSI against the rest of the archive")
    _add_engine_args(p)
    p.add_argument("--query", required=True, help="WSI id")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--mode", choices=("wsi", "patient"), default="wsi")
    p.add_argument("--trace-ranking", action="store_true", help="ranking stages as JSON lines on stderr")

    p = sub.add_parser("bench", help="leave-one-out benchmark over engines")
    _add_engine_args(p, multiple=True)
    p.add_argument("--mode", choices=("wsi", "patient"), default="patient")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3, help="timing repetitions (median reported)")
    p.add_argument("--no-timing", action="store_true", help="null out wall-clock fields")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--trace-ranking", action="store_true", help="ranking stages as JSON lines on stderr")

    p = sub.add_parser("report", help="render a saved bench report")
    p.add_argument("input")
    p.add_argument("--format", choices=("json", "table"), default="table")
    return parser


def _synth(args) -> None:
    ppc = args.patients_per_class or max(1, args.wsis_per_class // 3)
    spec = SynthSpec(num_classes=args.classes, wsis_per_class=args.wsis_per_class, patients_per_class=ppc,
                     grid_w=args.grid[0], grid_h=args.grid[1], class_separation=args.separation,
                     noise_sigma=args.noise, seed=args.seed, feature_dim=args.dim)
    try:
        manifest = generate_synthetic_archive(spec, args.out)
    except ValueError as exc:
        raise UsageError(str(exc))
    print(json.dumps({"archive": str(Path(args.out)), "wsis": len(manifest.records),
                      "classes": manifest.classes}, sort_keys=True))


def _index(args) -> None:
    manifest = load_manifest(args.archive)
    engine = Engine(engine_config(args.engine, args.seed), manifest).build(workers=args.workers)
    save_index(engine.index, args.out)
    for wsi_id, err in sorted(engine.failures.items()):
        print(f"failed: {wsi_id}: {err}", file=sys.stderr)
    out = storage_report(engine.index).to_json()
    out.update(engine=args.engine, index=str(args.out), failures=len(engine.failures))
    print(json.dumps(out, sort_keys=True))


def _search(args) -> None:
    manifest = load_manifest(args.archive)
    manifest.record(args.query)
    engine = Engine(engine_config(args.engine, args.seed), manifest).build(workers=args.workers)
    trace = trace_writer(sys.stderr) if args.trace_ranking else None
    result = engine.query(args.query, args.k, args.mode == "patient", trace=trace)
    print(json.dumps(result.to_json(), sort_keys=True))


def _bench(args) -> None:
    manifest = load_manifest(args.archive)
    trace = trace_writer(sys.stderr) if args.trace_ranking else None
    results = []
    for name in args.engine or ENGINE_NAMES:
        print(f"bench: {name}", file=sys.stderr)
        results.append(run_leave_one_out(manifest, engine_config(name, args.seed), args.mode, args.k,
                                         args.workers, args.repeats, trace))
    report = build_report(results, manifest, args.mode, args.k, timing=not args.no_timing,
                          repeats=args.repeats, seed=args.seed)
    if args.out:
        Path(args.out).write_text(emit_report(report, "json"))
    sys.stdout.write(emit_report(report, args.format))


def _report(args) -> None:
    report = json.loads(Path(args.input).read_text())
    sys.stdout.write(emit_report(report, args.format))


COMMANDS = {"synth": _synth, "index": _index, "search": _search, "bench": _bench, "report": _report}


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        if getattr(args, "repeats", 1) < 1:
            raise UsageError("--repeats must be >= 1")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except KeyError as exc:
        print(f"error: unknown WSI {exc.args[0]!r}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
