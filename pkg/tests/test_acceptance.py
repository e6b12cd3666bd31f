"""Acceptance suite: one test per release criterion, one PASS line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the reports.
Quantitative checks that depend on host hardware state their
preconditions; the 4-slot scaling criterion requires >= 8 physical cores
and is skipped (with measured numbers in the skip reason) on smaller
hosts.
"""

import gc
import statistics
import subprocess
import sys
import threading
import time

import numpy as np
import psutil
import pytest

from colpipe.colfmt import DatasetSpec, generate_synthetic
from colpipe.errors import JobAbortedError
from colpipe.ops import VocabTable
from colpipe.oracle import oracle_run
from colpipe.pipeline import Engine, EngineConfig, PRESETS, SlotStatus
from colpipe.service import PreprocessService, preprocess_remote_batch
from colpipe.transport import BatchSource, FileSource

PRESET_NAMES = ("P-I", "P-II", "P-III")

# Documented bound for the streaming-memory criterion: peak RSS growth
# while processing, independent of row count. Budget: one 1 MiB input
# slab in flight, <= 16 output queue items of <= 1 MiB, and a handful of
# kernel temporaries; 64 MiB leaves 2x headroom over the worst observed.
MEMORY_BOUND_MIB = 64


def _engine(slots=1, queue_depth=16):
    return Engine(EngineConfig(slot_count=slots, queue_depth=queue_depth))


def _assert_engine_matches_oracle(out_batch, oracle_res, tables=None,
                                  oracle_tables=None):
    for got, want in zip(out_batch.dense, oracle_res.dense_out):
        assert got.values.tobytes() == want.values.tobytes()
    for got, want in zip(out_batch.sparse, oracle_res.sparse_out):
        values = getattr(got, "values", None)
        if values is None:
            assert got.tokens.tobytes() == want.tobytes()
        else:
            assert np.array_equal(values.astype(np.uint64),
                                  want.astype(np.uint64))
    if tables is not None and oracle_tables is not None:
        assert len(tables) == len(oracle_tables)
        for got, want in zip(tables, oracle_tables):
            assert dict(got.items()) == dict(want.items())


class TestAcceptance:
    def test_c1_oracle_equivalence(self):
        """50 seeded batches x {P-I, P-II, P-III}: engine == oracle, exact."""
        started = time.perf_counter()
        rng = np.random.default_rng(20240817)
        shapes = []
        for i in range(25):  # D-I-shaped
            rows = int(np.exp(rng.uniform(np.log(100), np.log(100_000))))
            shapes.append((rows, 13, 26))
        for i in range(24):  # D-II-shaped
            rows = int(np.exp(rng.uniform(np.log(100), np.log(2_000))))
            shapes.append((rows, 504, 42))
        shapes.append((100_000, 13, 26))  # pin the upper row bound
        assert len(shapes) == 50

        engine = _engine(slots=1)
        checked = 0
        for i, (rows, dense, sparse) in enumerate(shapes):
            batch = generate_synthetic(DatasetSpec(
                rows=rows, dense_features=dense, sparse_features=sparse,
                seed=1000 + i, negative_fraction=0.25, nan_fraction=0.05,
                sparse_cardinality=int(rng.integers(50, 50_000))))
            for preset in PRESET_NAMES:
                spec = PRESETS[preset]
                engine.reconfigure(0, spec)
                handle = engine.run(0, BatchSource(batch))
                out = handle.collect()
                expected = oracle_run(batch, spec)
                engine_tables = [engine.slots[0].state[k]
                                 for k in sorted(engine.slots[0].state)]
                _assert_engine_matches_oracle(
                    out, expected,
                    tables=engine_tables if spec.stateful else None,
                    oracle_tables=expected.tables if spec.stateful else None)
                checked += 1
        elapsed = time.perf_counter() - started
        assert checked == 150
        assert elapsed < 300, f"suite must finish in < 5 min, took {elapsed:.0f}s"
        print(f"\nACCEPTANCE C1 oracle-equivalence: PASS "
              f"(50 batches x 3 pipelines bit-identical, {elapsed:.1f}s)")

    @pytest.mark.parametrize("modulus", [8192, 524288])
    def test_c2_vocabulary_semantics(self, modulus):
        """10^6 values: chunked vocab build == brute-force first-occurrence."""
        rng = np.random.default_rng(modulus)
        values = rng.integers(0, modulus, size=1_000_000, dtype=np.uint64)
        table = VocabTable(modulus)
        for chunk in np.array_split(values, 123):  # uneven chunk boundaries
            table.absorb_block(chunk)
        table.freeze()

        seen = {}
        for v in values.tolist():
            if v not in seen:
                seen[v] = len(seen)
        assert dict(table.items()) == seen
        assert len(table) <= modulus
        assert list(seen.values()) == list(range(len(seen)))
        indices = table.lookup_block(values)
        first = indices[np.sort(np.unique(indices, return_index=True)[1])]
        assert first.tolist() == list(range(len(table)))
        print(f"\nACCEPTANCE C2 vocabulary-semantics (M={modulus}): PASS "
              f"(10^6 values, {len(table)} entries, exact)")

    def test_c3_streaming_memory_bound(self, tmp_path):
        """10^7-row stateless stream stays under a fixed RSS growth bound."""
        big = tmp_path / "big.col"
        small = tmp_path / "small.col"
        for rows, path in ((10_000_000, big), (1_000_000, small)):
            subprocess.run(
                [sys.executable, "-m", "colpipe", "gen", "--rows", str(rows),
                 "--dense", "1", "--sparse", "1", "--seed", "5",
                 "--cardinality", "10000", "-o", str(path)],
                check=True, capture_output=True)
        assert big.stat().st_size == 24 + 10_000_000 * 12

        process = psutil.Process()

        def run_and_sample(path, out_path):
            engine = _engine(slots=1, queue_depth=16)
            engine.configure_slot(0, "P-I")
            gc.collect()
            baseline = process.memory_info().rss
            peak = baseline
            done = threading.Event()

            def sample():
                nonlocal peak
                while not done.is_set():
                    peak = max(peak, process.memory_info().rss)
                    time.sleep(0.002)

            sampler = threading.Thread(target=sample, daemon=True)
            sampler.start()
            handle = engine.run_stateless(0, FileSource(path))
            written = handle.to_file(out_path)
            done.set()
            sampler.join()
            peak = max(peak, process.memory_info().rss)
            assert written > 0
            return (peak - baseline) / (1024 * 1024)

        delta_small = run_and_sample(small, tmp_path / "small.out")
        delta_big = run_and_sample(big, tmp_path / "big.out")
        assert delta_big < MEMORY_BOUND_MIB, (
            f"peak RSS grew {delta_big:.1f} MiB on the 10^7-row stream; "
            f"documented bound is {MEMORY_BOUND_MIB} MiB")
        # 10x the rows must not shift the peak: growth is row-count independent
        assert delta_big <= delta_small + 32
        print(f"\nACCEPTANCE C3 streaming-memory-bound: PASS "
              f"(peak +{delta_big:.1f} MiB on 120 MB input, "
              f"+{delta_small:.1f} MiB on 12 MB input, bound "
              f"{MEMORY_BOUND_MIB} MiB)")

    def test_c4_multi_tenant_scaling(self, tmp_path):
        """Aggregate P-I throughput at 4 slots vs 1 slot, median of 5."""
        from colpipe.colfmt import write_synthetic
        path = tmp_path / "scale.col"
        write_synthetic(DatasetSpec(rows=400_000, dense_features=4,
                                    sparse_features=6, seed=99,
                                    sparse_cardinality=5_000), path)
        payload = path.stat().st_size - 24

        def median_rate(slot_count):
            engine = _engine(slots=slot_count)
            for s in range(slot_count):
                engine.configure_slot(s, "P-I")
            jobs = [(s, FileSource(path)) for s in range(slot_count)]
            engine.run_concurrent(jobs, collect="discard")  # warm-up
            rates = []
            for _ in range(5):
                t0 = time.perf_counter()
                engine.run_concurrent(jobs, collect="discard")
                rates.append(slot_count * payload / (time.perf_counter() - t0))
            return statistics.median(rates)

        single = median_rate(1)
        quad = median_rate(4)
        ratio = quad / single
        cores = psutil.cpu_count(logical=False) or 0
        # independent jobs must never collapse below a single slot's rate
        assert ratio >= 0.8, f"4-slot aggregate collapsed to {ratio:.2f}x"
        if cores >= 8:
            assert ratio >= 3.2, (
                f"aggregate at 4 slots is {ratio:.2f}x single-slot; "
                "criterion requires >= 3.2x on this host")
            print(f"\nACCEPTANCE C4 multi-tenant-scaling: PASS "
                  f"({ratio:.2f}x >= 3.2x at 4 slots, {cores} cores)")
        else:
            print(f"\nACCEPTANCE C4 multi-tenant-scaling: SKIPPED "
                  f"(host has {cores} physical cores, criterion requires "
                  f">= 8; measured 4v1 ratio {ratio:.2f}x, single "
                  f"{single / 1e6:.0f} MB/s)")
            pytest.skip(
                f"needs >= 8 physical cores, host has {cores}; measured "
                f"4-slot/1-slot aggregate ratio {ratio:.2f}x "
                f"(single {single / 1e6:.0f} MB/s, quad {quad / 1e6:.0f} MB/s)")

    def test_c5_reconfiguration_isolation(self):
        """Swapping one of four live slots never perturbs the other three."""
        batches = [generate_synthetic(DatasetSpec(
            rows=150_000, dense_features=2, sparse_features=3, seed=300 + i,
            sparse_cardinality=2_000)) for i in range(4)]
        engine = _engine(slots=4, queue_depth=4)
        for s in range(4):
            engine.configure_slot(s, "P-I")
        solo = [engine.run_stateless(s, BatchSource(batches[s])).collect()
                for s in range(4)]

        results, errors, handles = [None] * 4, [None] * 4, [None] * 4

        def collect(i):
            try:
                handles[i] = engine.run_stateless(i, BatchSource(batches[i]))
                results[i] = handles[i].collect()
            except Exception as exc:
                errors[i] = exc

        threads = [threading.Thread(target=collect, args=(i,))
                   for i in range(4)]
        for t in threads:
            t.start()
        deadline = time.time() + 10
        while time.time() < deadline:
            h = handles[2]
            if h is not None and h.stats.bytes_out > 0:
                break
            time.sleep(0.001)
        engine.reconfigure(2, "P-III", deadline=10.0)
        for t in threads:
            t.join()
        for i in (0, 1, 3):
            assert errors[i] is None, f"slot {i} failed: {errors[i]}"
            assert results[i] == solo[i], f"slot {i} output perturbed"
        assert isinstance(errors[2], JobAbortedError) or results[2] == solo[2]
        assert engine.slots[2].spec.id == "P-III"
        assert engine.slots[2].state == {}
        assert engine.slots[2].status is SlotStatus.IDLE

        # drain deadline on an idle queue: swap must finish within 100 ms
        t0 = time.perf_counter()
        engine.reconfigure(3, "P-II", deadline=0.1)
        swap = time.perf_counter() - t0
        assert swap < 0.1
        print(f"\nACCEPTANCE C5 reconfiguration-isolation: PASS "
              f"(3 live slots bit-identical, idle swap {swap * 1000:.1f} ms)")

    def test_c6_remote_local_equivalence(self, tmp_path):
        """Every (preset, batch) pair: service output == local, bit-exact."""
        spool = tmp_path / "spool"
        spool.mkdir()
        batches = [
            generate_synthetic(DatasetSpec(
                rows=10_000, dense_features=13, sparse_features=26, seed=71,
                sparse_cardinality=3_000)),
            generate_synthetic(DatasetSpec(
                rows=100_000, dense_features=3, sparse_features=4, seed=72,
                sparse_cardinality=30_000)),
            generate_synthetic(DatasetSpec(
                rows=1_000, dense_features=2, sparse_features=2, seed=73,
                sparse_cardinality=64)),
        ]
        service = PreprocessService(EngineConfig(slot_count=2),
                                    spool_dir=str(spool))
        host, port = service.start()
        local = _engine(slots=1)
        pairs = 0
        try:
            for preset in PRESET_NAMES:
                for batch in batches:
                    remote = preprocess_remote_batch((host, port), preset,
                                                     batch)
                    local.reconfigure(0, preset)
                    want = local.run(0, BatchSource(batch)).collect()
                    assert remote == want, f"{preset} diverged remotely"
                    pairs += 1
        finally:
            service.stop(graceful=False)
        assert list(spool.iterdir()) == []  # stateful spools cleaned up
        print(f"\nACCEPTANCE C6 remote-local-equivalence: PASS "
              f"({pairs} preset x batch pairs bit-exact incl. spooled "
              f"stateful sessions)")

    def test_c7_stateful_ordering(self, tmp_path):
        """Single-slot wall time: P-III > P-II > P-I on identical input."""
        from colpipe.colfmt import write_synthetic
        path = tmp_path / "ordering.col"
        write_synthetic(DatasetSpec(rows=300_000, dense_features=1,
                                    sparse_features=6, seed=55,
                                    sparse_cardinality=1_000_000), path)

        def median_wall(preset):
            engine = _engine(slots=1)
            engine.configure_slot(0, preset)
            engine.run(0, FileSource(path)).drain()  # warm-up
            walls = []
            for _ in range(5):
                t0 = time.perf_counter()
                engine.run(0, FileSource(path)).drain()
                walls.append(time.perf_counter() - t0)
            return statistics.median(walls)

        t1, t2, t3 = (median_wall(p) for p in PRESET_NAMES)
        assert t3 > t2, f"P-III ({t3:.3f}s) not slower than P-II ({t2:.3f}s)"
        assert t2 > t1, f"P-II ({t2:.3f}s) not slower than P-I ({t1:.3f}s)"
        print(f"\nACCEPTANCE C7 stateful-ordering: PASS "
              f"(P-I {t1:.3f}s < P-II {t2:.3f}s < P-III {t3:.3f}s)")
