"""Command-line entry point: gen, run, serve, and bench subcommands.

Exit codes: 0 on success, 1 on usage errors (bad flags, unknown preset,
missing paths), 2 on runtime failures; messages go to stderr.
"""

from __future__ import annotations

import argparse
import signal
import sys
import time
from pathlib import Path

from .bench import bench_operators, bench_pipeline, format_table, write_reports
from .colfmt import DatasetSpec, write_synthetic
from .errors import ColpipeError, SpecError
from .pipeline import Engine, EngineConfig, compile_spec
from .service import PreprocessService
from .transport import FileSource

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise _UsageError(f"{message}\n\n{self.format_usage()}")


def build_parser() -> _Parser:
    parser = _Parser(prog="colpipe",
                     description="Streaming columnar preprocessing engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic columnar dataset")
    gen.add_argument("--rows", type=int, required=True)
    gen.add_argument("--dense", type=int, default=13,
                     help="dense feature count (default 13)")
    gen.add_argument("--sparse", type=int, default=26,
                     help="sparse feature count (default 26)")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--negative-fraction", type=float, default=0.25)
    gen.add_argument("--nan-fraction", type=float, default=0.05)
    gen.add_argument("--cardinality", type=int, default=10_000,
                     help="distinct tokens per sparse column")
    gen.add_argument("--token-width", type=int, default=8)
    gen.add_argument("-o", "--output", required=True)

    run = sub.add_parser("run", help="run a pipeline over a columnar file")
    run.add_argument("--pipeline", required=True,
                     help="preset name (P-I, P-II, P-III) or @spec-file")
    run.add_argument("-i", "--input", required=True)
    run.add_argument("-o", "--output", required=True)
    run.add_argument("--queue-depth", type=int, default=16)

    srv = sub.add_parser("serve", help="run the preprocessing service")
    srv.add_argument("--bind", default="127.0.0.1:9733",
                     help="host:port to listen on (default 127.0.0.1:9733)")
    srv.add_argument("--slots", type=int, default=7)
    srv.add_argument("--spool-dir", default=None,
                     help="directory for stateful-session spools "
                          "(default: $COLPIPE_SPOOL_DIR or system temp)")

    bench = sub.add_parser("bench", help="throughput and operator benchmarks")
    bench.add_argument("--pipeline", default="P-I")
    bench.add_argument("--rows", type=int, default=1_000_000)
    bench.add_argument("--dense", type=int, default=13)
    bench.add_argument("--sparse", type=int, default=26)
    bench.add_argument("--cardinality", type=int, default=10_000)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--slots", default="1,2,4",
                       help="comma-separated slot counts (default 1,2,4)")
    bench.add_argument("--trials", type=int, default=5)
    bench.add_argument("--warmup", type=int, default=2)
    bench.add_argument("--operators", action="store_true",
                       help="benchmark individual operators instead of "
                            "whole pipelines")
    bench.add_argument("-o", "--output", default=None,
                       help="write the report as JSON lines to this path")
    return parser


def _dataset_from_args(args) -> DatasetSpec:
    return DatasetSpec(rows=args.rows, dense_features=args.dense,
                       sparse_features=args.sparse, seed=args.seed,
                       negative_fraction=getattr(args, "negative_fraction", 0.25),
                       nan_fraction=getattr(args, "nan_fraction", 0.05),
                       sparse_cardinality=args.cardinality,
                       token_width=getattr(args, "token_width", 8))


def _load_pipeline(text: str):
    if text.startswith("@"):
        path = Path(text[1:])
        if not path.is_file():
            raise _UsageError(f"pipeline spec file not found: {path}")
        return compile_spec(path.read_text())
    try:
        return compile_spec(text)
    except SpecError as exc:
        raise _UsageError(str(exc)) from None


def _check_output_path(raw) -> Path:
    path = Path(raw)
    if not path.parent.is_dir():
        raise _UsageError(f"output directory does not exist: {path.parent}")
    return path


def _cmd_gen(args) -> int:
    spec = _dataset_from_args(args)
    try:
        spec.validate()
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    out_path = _check_output_path(args.output)
    t0 = time.perf_counter()
    written = write_synthetic(spec, out_path)
    dt = time.perf_counter() - t0
    print(f"wrote {written} bytes ({spec.rows} rows, {spec.dense_features} "
          f"dense + {spec.sparse_features} sparse) to {args.output} "
          f"in {dt:.2f}s")
    return EXIT_OK


def _cmd_run(args) -> int:
    spec = _load_pipeline(args.pipeline)
    in_path = Path(args.input)
    if not in_path.is_file():
        raise _UsageError(f"input file not found: {in_path}")
    out_path = _check_output_path(args.output)
    engine = Engine(EngineConfig(slot_count=1, queue_depth=args.queue_depth))
    engine.configure_slot(0, spec)
    t0 = time.perf_counter()
    handle = engine.run(0, FileSource(in_path))
    written = handle.to_file(out_path)
    dt = time.perf_counter() - t0
    stats = handle.stats
    print(f"{spec.id}: {stats.rows} rows, {stats.bytes_in} bytes in, "
          f"{written} bytes out in {dt:.2f}s "
          f"({stats.bytes_in / max(dt, 1e-9) / 1e6:.1f} MB/s)")
    return EXIT_OK


def _cmd_serve(args) -> int:
    host, _, port = args.bind.rpartition(":")
    if not host or not port.isdigit():
        raise _UsageError(f"--bind expects host:port, got {args.bind!r}")
    service = PreprocessService(EngineConfig(slot_count=args.slots),
                                host=host, port=int(port),
                                spool_dir=args.spool_dir)
    bound_host, bound_port = service.start()
    print(f"serving on {bound_host}:{bound_port} with {args.slots} slots",
          flush=True)
    stop = []
    signal.signal(signal.SIGTERM, lambda *_: stop.append(True))
    try:
        while not stop:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    print("shutting down", flush=True)
    service.stop(graceful=False)
    return EXIT_OK


def _cmd_bench(args) -> int:
    dataset = _dataset_from_args(args)
    try:
        dataset.validate()
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    if args.operators:
        reports = bench_operators(dataset, trials=args.trials,
                                  warmup=args.warmup)
    else:
        try:
            slot_counts = [int(s) for s in args.slots.split(",") if s.strip()]
        except ValueError:
            raise _UsageError(f"--slots expects integers, got {args.slots!r}")
        spec = _load_pipeline(args.pipeline)
        reports = bench_pipeline(spec, dataset, slot_counts,
                                 trials=args.trials, warmup=args.warmup)
    print(format_table(reports))
    if args.output:
        write_reports(reports, _check_output_path(args.output))
        print(f"report written to {args.output}")
    return EXIT_OK


_COMMANDS = {"gen": _cmd_gen, "run": _cmd_run, "serve": _cmd_serve,
             "bench": _cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ColpipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # contract: never a bare traceback
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
