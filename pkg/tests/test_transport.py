"""Wire framing, sources, the arbiter, and throughput measurement."""

import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from colpipe.colfmt import (ColumnBatch, DenseColumn, SparseColumn,
                            write_column_file)
from colpipe.errors import CapabilityError, ProtocolError
from colpipe.transport import (BEAT_BYTES, FRAME_HEADER_SIZE, MAX_PAYLOAD,
                               SCHEMA_COLUMN, Arbiter, BatchSource,
                               BytesSource, FileSource, FrameHeader,
                               FrameType, NetworkClientSource, SpoolingSource,
                               arbitrate, collect_frames, full_frame_bytes,
                               make_frame, measure_source_throughput,
                               open_source, serve_file_once)


def _small_batch(rows=2, width=8):
    tokens = np.array([b"%08x" % i for i in range(rows)], dtype=f"S{width}")
    return ColumnBatch(
        row_count=rows,
        dense=[DenseColumn("dense_0", np.arange(rows, dtype=np.float32))],
        sparse=[SparseColumn("sparse_0", tokens)])


def _file_bytes(batch):
    sink = io.BytesIO()
    write_column_file(batch, sink)
    return sink.getvalue()


class TestFrameHeader:
    def test_exactly_16_bytes(self):
        header = FrameHeader(int(FrameType.DATA), 3, 7, 64, 12)
        raw = header.encode()
        assert FRAME_HEADER_SIZE == 16
        assert len(raw) == 16
        assert FrameHeader.decode(raw) == header

    def test_payload_limit_enforced(self):
        with pytest.raises(ProtocolError):
            make_frame(FrameType.DATA, 0, 0, 0, b"x" * (MAX_PAYLOAD + 1))
        too_big = FrameHeader(1, 0, 0, MAX_PAYLOAD + 1, 0).encode()
        with pytest.raises(ProtocolError):
            FrameHeader.decode(too_big)

    def test_unknown_type_rejected(self):
        raw = FrameHeader(9, 0, 0, 0, 0).encode()
        with pytest.raises(ProtocolError):
            FrameHeader.decode(raw)


class TestFraming:
    @given(st.integers(1, 16))
    def test_full_frames_are_whole_beats_and_elements(self, width):
        size = full_frame_bytes(width)
        assert size % BEAT_BYTES == 0
        assert size % width == 0
        assert 0 < size <= MAX_PAYLOAD

    def test_file_source_round_trip_48_byte_file(self, tmp_path):
        batch = _small_batch()
        path = tmp_path / "two.col"
        path.write_bytes(_file_bytes(batch))
        assert path.stat().st_size == 48
        frames = list(FileSource(path).frames())
        assert frames[0].header.column_index == SCHEMA_COLUMN
        assert frames[-1].header.frame_type == FrameType.END
        assert collect_frames(frames) == batch

    def test_no_element_straddles_frames(self, tmp_path):
        rng = np.random.default_rng(5)
        rows = 40_000  # several frames per column
        tokens = np.array([b"%07x" % (i % 4096) for i in range(rows)],
                          dtype="S7")
        batch = ColumnBatch(
            row_count=rows,
            dense=[DenseColumn("d", rng.normal(size=rows).astype(np.float32))],
            sparse=[SparseColumn("s", tokens)])
        frames = [f for f in BatchSource(batch).frames()
                  if f.header.frame_type == FrameType.DATA
                  and f.header.column_index != SCHEMA_COLUMN]
        per_col = {}
        for f in frames:
            per_col.setdefault(f.header.column_index, []).append(f)
        for col, col_frames in per_col.items():
            width = 4 if col == 0 else 7
            for f in col_frames[:-1]:
                assert len(f.payload) % BEAT_BYTES == 0
                assert len(f.payload) % width == 0
            assert len(col_frames[-1].payload) % width == 0

    def test_sequences_strictly_increase_per_stream(self):
        frames = list(BatchSource(_small_batch(rows=100)).frames(slot_id=3))
        seqs = [f.header.sequence for f in frames]
        assert seqs == sorted(set(seqs))
        assert all(f.header.slot_id == 3 for f in frames)

    def test_batch_source_equals_file_source(self, tmp_path):
        batch = _small_batch(rows=500)
        path = tmp_path / "b.col"
        path.write_bytes(_file_bytes(batch))
        from_file = [f.payload for f in FileSource(path).frames()]
        from_batch = [f.payload for f in BatchSource(batch).frames()]
        assert from_file == from_batch


class TestReplay:
    def test_memory_source_replayable(self):
        source = BytesSource(_file_bytes(_small_batch(rows=300)))
        first = [f.payload for f in source.frames()]
        second = [f.payload for f in source.frames()]
        assert first == second

    def test_file_source_replayable(self, tmp_path):
        path = tmp_path / "c.col"
        path.write_bytes(_file_bytes(_small_batch(rows=300)))
        source = FileSource(path)
        assert [f.payload for f in source.frames()] == \
               [f.payload for f in source.frames()]

    def test_network_source_single_pass(self, tmp_path):
        path = tmp_path / "n.col"
        batch = _small_batch(rows=100)
        path.write_bytes(_file_bytes(batch))
        host, port, thread = serve_file_once(path)
        source = NetworkClientSource(host, port)
        assert collect_frames(source.frames()) == batch
        with pytest.raises(CapabilityError):
            list(source.frames())
        source.close()
        thread.join(timeout=5)

    def test_spooling_source_writes_file_image(self, tmp_path):
        batch = _small_batch(rows=123)
        blob = _file_bytes(batch)
        path = tmp_path / "in.col"
        path.write_bytes(blob)
        host, port, thread = serve_file_once(path)
        spool = tmp_path / "spool.col"
        source = SpoolingSource(NetworkClientSource(host, port), spool)
        for _ in source.frames():
            pass
        assert spool.read_bytes() == blob
        thread.join(timeout=5)


class TestOpenSource:
    def test_dispatch(self, tmp_path):
        batch = _small_batch()
        path = tmp_path / "d.col"
        path.write_bytes(_file_bytes(batch))
        assert isinstance(open_source(path), FileSource)
        assert isinstance(open_source(str(path)), FileSource)
        assert isinstance(open_source(batch), BatchSource)
        assert isinstance(open_source(_file_bytes(batch)), BytesSource)
        with pytest.raises(CapabilityError):
            open_source(3.14)


class TestArbiter:
    def _frame(self, slot, seq):
        return make_frame(FrameType.DATA, slot, 0, seq, b"")

    def test_round_robin_two_slots(self):
        frames = []
        for seq in range(5):
            frames.append(self._frame(0, seq))
            frames.append(self._frame(1, seq))
        out = arbitrate(frames, window=4)
        assert [f.header.sequence for f in out[0]] == list(range(5))
        assert [f.header.sequence for f in out[1]] == list(range(5))

    def test_reorder_within_window(self):
        frames = [self._frame(0, s) for s in (2, 1, 3)]
        out = arbitrate(frames, window=2, first_sequence=1)
        assert [f.header.sequence for f in out[0]] == [1, 2, 3]

    def test_gap_beyond_window_names_expected(self):
        arb = Arbiter(window=2, first_sequence=1)
        for seq in (1, 2):
            arb.push(self._frame(0, seq))
        with pytest.raises(ProtocolError) as err:
            arb.push(self._frame(0, 5))
        assert err.value.expected == 3
        assert err.value.actual == 5

    def test_duplicate_rejected(self):
        arb = Arbiter(window=4)
        arb.push(self._frame(0, 0))
        with pytest.raises(ProtocolError):
            arb.push(self._frame(0, 0))

    def test_output_is_prefix_closed_and_gap_free(self):
        rng = np.random.default_rng(9)
        delivered = []
        arb = Arbiter(window=8)
        pending = list(range(64))
        # shuffle within windows of 8
        for base in range(0, 64, 8):
            chunk = pending[base:base + 8]
            rng.shuffle(chunk)
            for seq in chunk:
                delivered.extend(
                    f.header.sequence for f in arb.push(self._frame(0, seq)))
        assert delivered == list(range(64))

    def test_incomplete_stream_detected(self):
        frames = [self._frame(0, 0), self._frame(0, 2)]
        with pytest.raises(ProtocolError):
            arbitrate(frames, window=4)


class TestThroughput:
    def test_zero_length_source_reports_zero(self):
        empty = ColumnBatch(row_count=0, dense=[], sparse=[])
        stats = measure_source_throughput(empty, duration=0.05, trials=5)
        assert stats["bytes_per_second_mean"] >= 0.0
        assert stats["trials"] == 5

    def test_memory_at_least_as_fast_as_file(self, tmp_path):
        batch = _small_batch(rows=200_000)
        blob = _file_bytes(batch)
        path = tmp_path / "t.col"
        path.write_bytes(blob)
        mem = measure_source_throughput(blob, duration=0.2, trials=5)
        fil = measure_source_throughput(path, duration=0.2, trials=5)
        # same order of magnitude required; memory should not lose badly
        assert mem["bytes_per_second_mean"] >= 0.6 * fil["bytes_per_second_mean"]

    def test_loopback_not_faster_than_memory(self, tmp_path):
        batch = _small_batch(rows=200_000)
        blob = _file_bytes(batch)
        path = tmp_path / "t.col"
        path.write_bytes(blob)
        mem = measure_source_throughput(blob, duration=0.2, trials=5)
        host, port, thread = serve_file_once(path)
        net = measure_source_throughput(NetworkClientSource(host, port),
                                        duration=0.2, trials=1)
        thread.join(timeout=5)
        assert net["bytes_per_second_mean"] <= 1.5 * mem["bytes_per_second_mean"]
