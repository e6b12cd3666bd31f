"""Benchmark harness: pipeline scaling runs and per-operator timings.

Every measurement does warm-up runs first, then at least five timed
trials, and reports mean plus standard deviation; single numbers are
never reported without their spread. Reports serialize to JSON lines
and render as a plain-text table.
"""

from __future__ import annotations

import json
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import psutil

from . import ops
from .colfmt import DatasetSpec, generate_synthetic, write_synthetic
from .pipeline import Engine, EngineConfig, PipelineSpec, compile_spec
from .transport import FileSource

MIN_TRIALS = 5

# Operator rows in the order they are conventionally reported.
OPERATOR_ROWS = ("Neg2Zero", "Logarithm", "Hex2Int", "Modulus",
                 "VocabGen-8K", "VocabMap-8K", "VocabGen-512K", "VocabMap-512K")


@dataclass
class BenchReport:
    label: str
    rows: int
    payload_bytes: int
    trials: int
    warmup: int
    wall_seconds_mean: float
    wall_seconds_std: float
    throughput_bytes_per_second: float
    throughput_rows_per_second: float
    wall_seconds_median: float = 0.0
    wall_seconds_min: float = 0.0
    per_slot_bytes_per_second: List[float] = field(default_factory=list)
    slot_count: int = 1
    host_physical_cores: int = 0
    host_logical_cores: int = 0

    @property
    def median_bytes_per_second(self) -> float:
        if self.wall_seconds_median > 0:
            return self.payload_bytes / self.wall_seconds_median
        return self.throughput_bytes_per_second

    @property
    def peak_bytes_per_second(self) -> float:
        """Best-of-trials rate; the noise-robust figure for comparisons."""
        if self.wall_seconds_min > 0:
            return self.payload_bytes / self.wall_seconds_min
        return self.throughput_bytes_per_second

    def __post_init__(self):
        if self.trials < MIN_TRIALS:
            raise ValueError(
                f"reports need >= {MIN_TRIALS} trials, got {self.trials}")

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "BenchReport":
        return cls(**json.loads(line))


def _host_cores() -> Dict[str, int]:
    return {
        "host_physical_cores": psutil.cpu_count(logical=False) or 0,
        "host_logical_cores": psutil.cpu_count(logical=True) or 0,
    }


def _timed_report(label: str, rows: int, payload_bytes: int,
                  run: Callable[[], object], trials: int, warmup: int,
                  slot_count: int = 1,
                  per_slot: Optional[List[float]] = None) -> BenchReport:
    for _ in range(warmup):
        run()
    walls = []
    for _ in range(trials):
        t0 = time.perf_counter()
        run()
        walls.append(time.perf_counter() - t0)
    mean = statistics.fmean(walls)
    std = statistics.pstdev(walls) if len(walls) > 1 else 0.0
    median = statistics.median(walls)
    return BenchReport(
        label=label, rows=rows, payload_bytes=payload_bytes, trials=trials,
        warmup=warmup, wall_seconds_mean=mean, wall_seconds_std=std,
        throughput_bytes_per_second=payload_bytes / mean if mean > 0 else 0.0,
        throughput_rows_per_second=rows / mean if mean > 0 else 0.0,
        wall_seconds_median=median, wall_seconds_min=min(walls),
        per_slot_bytes_per_second=per_slot or [], slot_count=slot_count,
        **_host_cores())


def bench_pipeline(pipeline: Union[str, PipelineSpec], dataset: DatasetSpec,
                   slot_counts: Sequence[int], trials: int = MIN_TRIALS,
                   warmup: int = 2, workdir: Optional[str] = None,
                   queue_depth: int = 16) -> List[BenchReport]:
    """Identical independent jobs on k slots for each k in slot_counts."""
    spec = compile_spec(pipeline) if isinstance(pipeline, str) else pipeline
    if any(k < 1 for k in slot_counts):
        raise ValueError("slot counts must be >= 1")
    reports = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = Path(tmp) / "bench-input.col"
        write_synthetic(dataset, path)
        payload = path.stat().st_size - 24
        for k in slot_counts:
            engine = Engine(EngineConfig(slot_count=k, queue_depth=queue_depth))
            for slot_id in range(k):
                engine.configure_slot(slot_id, spec)
            last_stats: List[float] = []

            def run_once(k=k, engine=engine, stats_out=last_stats):
                jobs = [(slot_id, FileSource(path)) for slot_id in range(k)]
                _, report = engine.run_concurrent(jobs, collect="discard")
                stats_out[:] = [j.bytes_per_second for j in report.jobs]
                return report

            report = _timed_report(
                label=f"{spec.id} x{k} slots", rows=dataset.rows * k,
                payload_bytes=payload * k, run=run_once, trials=trials,
                warmup=warmup, slot_count=k)
            report.per_slot_bytes_per_second = list(last_stats)
            reports.append(report)
    return reports


def _operator_inputs(dataset: DatasetSpec):
    batch = generate_synthetic(dataset)
    dense = [c.values for c in batch.dense]
    tokens = [c.tokens for c in batch.sparse]
    clipped = [ops.neg2zero_block(v) for v in dense]
    values = [ops.hex2int_block(t) for t in tokens]
    bounded = {m: [ops.modulus_block(v, m) for v in values]
               for m in (8192, 524288)}
    tables = {}
    for m, cols in bounded.items():
        built = []
        for col in cols:
            table = ops.VocabTable(m)
            table.absorb_block(col)
            built.append(table.freeze())
        tables[m] = built
    return dense, tokens, clipped, values, bounded, tables


def bench_operators(dataset: DatasetSpec, trials: int = MIN_TRIALS,
                    warmup: int = 2) -> List[BenchReport]:
    """Single-slot timing of each operator over the whole dataset."""
    dense, tokens, clipped, values, bounded, tables = _operator_inputs(dataset)
    rows = dataset.rows
    width = dataset.token_width

    def gen_run(m):
        def run():
            for col in bounded[m]:
                table = ops.VocabTable(m)
                table.absorb_block(col)
                table.freeze()
        return run

    def map_run(m):
        def run():
            for col, table in zip(bounded[m], tables[m]):
                table.lookup_block(col)
        return run

    cases = {
        "Neg2Zero": (lambda: [ops.neg2zero_block(v) for v in dense],
                     rows * len(dense), 4 * rows * len(dense)),
        "Logarithm": (lambda: [ops.logarithm_block(v) for v in clipped],
                      rows * len(clipped), 4 * rows * len(clipped)),
        "Hex2Int": (lambda: [ops.hex2int_block(t) for t in tokens],
                    rows * len(tokens), width * rows * len(tokens)),
        "Modulus": (lambda: [ops.modulus_block(v, 8192) for v in values],
                    rows * len(values), 8 * rows * len(values)),
        "VocabGen-8K": (gen_run(8192), rows * len(values), 8 * rows * len(values)),
        "VocabMap-8K": (map_run(8192), rows * len(values), 8 * rows * len(values)),
        "VocabGen-512K": (gen_run(524288), rows * len(values),
                          8 * rows * len(values)),
        "VocabMap-512K": (map_run(524288), rows * len(values),
                          8 * rows * len(values)),
    }
    reports = []
    for label in OPERATOR_ROWS:
        run, n_rows, n_bytes = cases[label]
        reports.append(_timed_report(label=label, rows=n_rows,
                                     payload_bytes=n_bytes, run=run,
                                     trials=trials, warmup=warmup))
    return reports


def write_reports(reports: Sequence[BenchReport], path) -> None:
    with open(path, "w") as fh:
        for report in reports:
            fh.write(report.to_json_line() + "\n")


def read_reports(path) -> List[BenchReport]:
    with open(path) as fh:
        return [BenchReport.from_json_line(line) for line in fh
                if line.strip()]


def format_table(reports: Sequence[BenchReport]) -> str:
    """Plain-text table for standard output."""
    headers = ("label", "slots", "rows", "mean s", "std s", "MB/s", "rows/s")
    rows = [headers]
    for r in reports:
        rows.append((r.label, str(r.slot_count), str(r.rows),
                     f"{r.wall_seconds_mean:.4f}", f"{r.wall_seconds_std:.4f}",
                     f"{r.throughput_bytes_per_second / 1e6:.1f}",
                     f"{r.throughput_rows_per_second:.0f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j])
                               for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * widths[j]
                                   for j in range(len(headers))))
    return "\n".join(lines)
