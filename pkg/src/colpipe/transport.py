"""Framed streaming sources and sinks over files, memory, and sockets.

All data moves as StreamFrames: a 16-byte little-endian header plus a
payload that always carries whole elements. Full frames are multiples
of the 64-byte beat; only a column's final frame may be a partial beat.
A stream is: one schema frame (the 24-byte file header, pseudo-column
0xFFFF), each column's DATA frames in file order, then END.
"""

from __future__ import annotations

import io
import math
import socket
import statistics
import struct
import threading
import time
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional

import numpy as np

from .colfmt import (HEADER_SIZE, ColumnBatch, ColumnFileHeader, SparseColumn,
                     read_column_file)
from .errors import (CapabilityError, FormatError, ProtocolError, RemoteError,
                     TruncatedFileError)

BEAT_BYTES = 64
MAX_PAYLOAD = 65536
SCHEMA_COLUMN = 0xFFFF

FRAME_HEADER_STRUCT = struct.Struct("<BBHIQ")
FRAME_HEADER_SIZE = FRAME_HEADER_STRUCT.size  # 16


class FrameType(IntEnum):
    DATA = 1
    CONFIG = 2
    END = 3
    ERROR = 4
    ACK = 5


@dataclass(frozen=True)
class FrameHeader:
    frame_type: int
    slot_id: int
    column_index: int
    payload_len: int
    sequence: int

    def encode(self) -> bytes:
        return FRAME_HEADER_STRUCT.pack(self.frame_type, self.slot_id,
                                        self.column_index, self.payload_len,
                                        self.sequence)

    @classmethod
    def decode(cls, raw: bytes, sequence_hint: int = -1) -> "FrameHeader":
        if len(raw) != FRAME_HEADER_SIZE:
            raise ProtocolError(
                f"frame header is {len(raw)} bytes, expected {FRAME_HEADER_SIZE}",
                sequence=sequence_hint)
        ftype, slot, column, plen, seq = FRAME_HEADER_STRUCT.unpack(raw)
        if ftype not in FrameType._value2member_map_:
            raise ProtocolError(f"unknown frame type {ftype}", sequence=seq)
        if plen > MAX_PAYLOAD:
            raise ProtocolError(
                f"payload length {plen} exceeds {MAX_PAYLOAD}", sequence=seq)
        return cls(ftype, slot, column, plen, seq)


@dataclass(frozen=True)
class StreamFrame:
    header: FrameHeader
    payload: bytes = b""

    def encode(self) -> bytes:
        return self.header.encode() + self.payload


def make_frame(frame_type: int, slot_id: int, column_index: int,
               sequence: int, payload: bytes = b"") -> StreamFrame:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(
            f"payload length {len(payload)} exceeds {MAX_PAYLOAD}",
            sequence=sequence)
    return StreamFrame(FrameHeader(int(frame_type), slot_id, column_index,
                                   len(payload), sequence), payload)


def full_frame_bytes(element_width: int, max_payload: int = MAX_PAYLOAD) -> int:
    """Largest payload <= max_payload that is whole beats and whole elements."""
    group = math.lcm(BEAT_BYTES, element_width)
    if group > max_payload:
        raise FormatError(
            f"element width {element_width} cannot fit a {max_payload}-byte frame")
    return (max_payload // group) * group


class _SequenceCounter:
    def __init__(self):
        self.value = 0

    def next(self) -> int:
        v = self.value
        self.value += 1
        return v


def _frames_from_reader(read: Callable[[int], bytes], header: ColumnFileHeader,
                        slot_id: int, max_payload: int) -> Iterator[StreamFrame]:
    seq = _SequenceCounter()
    yield make_frame(FrameType.DATA, slot_id, SCHEMA_COLUMN, seq.next(),
                     header.encode())
    for col in range(header.column_count):
        remaining = header.column_bytes(col)
        chunk_bytes = full_frame_bytes(header.column_byte_width(col), max_payload)
        while remaining > 0:
            want = min(chunk_bytes, remaining)
            buf = read(want)
            if len(buf) != want:
                raise TruncatedFileError(
                    f"column {col} truncated: wanted {want} bytes, got {len(buf)}",
                    column_index=col)
            yield make_frame(FrameType.DATA, slot_id, col, seq.next(), buf)
            remaining -= want
    yield make_frame(FrameType.END, slot_id, 0, seq.next())


class ColumnSlab:
    """A contiguous run of one column's payload bytes, engine-internal.

    Wire frames stay within MAX_PAYLOAD; slabs exist so local sources can
    hand the engine much larger element-aligned chunks in one hop.
    """

    __slots__ = ("column", "payload")

    def __init__(self, column: int, payload: bytes):
        self.column = column
        self.payload = payload


class FrameSource:
    """Base interface: a (re)playable stream of frames plus its schema."""

    replayable = False
    # pull-capable sources let the engine read slabs inline, without a
    # feeder thread; socket-backed sources need the decoupling
    supports_pull = False

    def schema(self) -> ColumnFileHeader:
        raise NotImplementedError

    def frames(self, slot_id: int = 0) -> Iterator[StreamFrame]:
        raise NotImplementedError

    def slabs(self, slab_bytes: int, slot_id: int = 0) -> Iterator[object]:
        """Schema frame, ColumnSlabs, then END; only if supports_pull."""
        raise CapabilityError(f"{type(self).__name__} is not pull-capable")


def _slab_bytes_for(width: int, slab_bytes: int) -> int:
    group = math.lcm(BEAT_BYTES, width)
    return max((slab_bytes // group) * group, group)


def _slabs_from_reader(read: Callable[[int], bytes],
                       header: ColumnFileHeader, slab_bytes: int,
                       slot_id: int) -> Iterator[object]:
    seq = _SequenceCounter()
    yield make_frame(FrameType.DATA, slot_id, SCHEMA_COLUMN, seq.next(),
                     header.encode())
    for col in range(header.column_count):
        remaining = header.column_bytes(col)
        chunk = _slab_bytes_for(header.column_byte_width(col), slab_bytes)
        while remaining > 0:
            want = min(chunk, remaining)
            buf = read(want)
            if len(buf) != want:
                raise TruncatedFileError(
                    f"column {col} truncated: wanted {want} bytes, got "
                    f"{len(buf)}", column_index=col)
            yield ColumnSlab(col, buf)
            remaining -= want
    yield make_frame(FrameType.END, slot_id, 0, seq.next())


class FileSource(FrameSource):
    """Streams a columnar file; each frames() call is an independent pass."""

    replayable = True
    supports_pull = True

    def __init__(self, path, max_payload: int = MAX_PAYLOAD):
        self.path = Path(path)
        self.max_payload = max_payload
        self._schema: Optional[ColumnFileHeader] = None

    def schema(self) -> ColumnFileHeader:
        if self._schema is None:
            with open(self.path, "rb") as fh:
                self._schema = ColumnFileHeader.decode(fh.read(HEADER_SIZE))
        return self._schema

    def frames(self, slot_id: int = 0) -> Iterator[StreamFrame]:
        with open(self.path, "rb") as fh:
            header = ColumnFileHeader.decode(fh.read(HEADER_SIZE))
            self._schema = header
            yield from _frames_from_reader(fh.read, header, slot_id,
                                           self.max_payload)

    def slabs(self, slab_bytes: int, slot_id: int = 0) -> Iterator[object]:
        with open(self.path, "rb") as fh:
            header = ColumnFileHeader.decode(fh.read(HEADER_SIZE))
            self._schema = header
            yield from _slabs_from_reader(fh.read, header, slab_bytes, slot_id)


class BytesSource(FrameSource):
    """Streams a columnar file image held in memory; replayable."""

    replayable = True
    supports_pull = True

    def __init__(self, data: bytes, max_payload: int = MAX_PAYLOAD):
        self.data = bytes(data)
        self.max_payload = max_payload

    def schema(self) -> ColumnFileHeader:
        return ColumnFileHeader.decode(self.data[:HEADER_SIZE])

    def frames(self, slot_id: int = 0) -> Iterator[StreamFrame]:
        reader = io.BytesIO(self.data)
        header = ColumnFileHeader.decode(reader.read(HEADER_SIZE))
        yield from _frames_from_reader(reader.read, header, slot_id,
                                       self.max_payload)

    def slabs(self, slab_bytes: int, slot_id: int = 0) -> Iterator[object]:
        reader = io.BytesIO(self.data)
        header = ColumnFileHeader.decode(reader.read(HEADER_SIZE))
        yield from _slabs_from_reader(reader.read, header, slab_bytes, slot_id)


class BatchSource(FrameSource):
    """Streams a live ColumnBatch without serializing it to a file first."""

    replayable = True
    supports_pull = True

    def __init__(self, batch: ColumnBatch, max_payload: int = MAX_PAYLOAD):
        self.batch = batch
        self.max_payload = max_payload

    def schema(self) -> ColumnFileHeader:
        return ColumnFileHeader.for_batch(self.batch)

    def _columns(self):
        columns = [c.values for c in self.batch.dense]
        columns += [c.tokens if isinstance(c, SparseColumn) else c.values
                    for c in self.batch.sparse]
        return columns

    def frames(self, slot_id: int = 0) -> Iterator[StreamFrame]:
        header = self.schema()
        seq = _SequenceCounter()
        yield make_frame(FrameType.DATA, slot_id, SCHEMA_COLUMN, seq.next(),
                         header.encode())
        for col, arr in enumerate(self._columns()):
            raw = np.ascontiguousarray(arr).tobytes()
            chunk_bytes = full_frame_bytes(header.column_byte_width(col),
                                           self.max_payload)
            for off in range(0, len(raw), chunk_bytes):
                yield make_frame(FrameType.DATA, slot_id, col, seq.next(),
                                 raw[off:off + chunk_bytes])
        yield make_frame(FrameType.END, slot_id, 0, seq.next())

    def slabs(self, slab_bytes: int, slot_id: int = 0) -> Iterator[object]:
        header = self.schema()
        seq = _SequenceCounter()
        yield make_frame(FrameType.DATA, slot_id, SCHEMA_COLUMN, seq.next(),
                         header.encode())
        for col, arr in enumerate(self._columns()):
            raw = np.ascontiguousarray(arr).tobytes()
            chunk = _slab_bytes_for(header.column_byte_width(col), slab_bytes)
            for off in range(0, len(raw), chunk):
                yield ColumnSlab(col, raw[off:off + chunk])
        yield make_frame(FrameType.END, slot_id, 0, seq.next())


def read_frame(sock_file, sequence_hint: int = -1) -> Optional[StreamFrame]:
    """Read one frame from a buffered byte stream; None on clean EOF."""
    head = sock_file.read(FRAME_HEADER_SIZE)
    if not head:
        return None
    if len(head) < FRAME_HEADER_SIZE:
        raise ProtocolError("connection closed mid-header",
                            sequence=sequence_hint)
    header = FrameHeader.decode(head, sequence_hint)
    payload = sock_file.read(header.payload_len) if header.payload_len else b""
    if len(payload) != header.payload_len:
        raise ProtocolError(
            f"connection closed mid-payload (frame {header.sequence})",
            sequence=header.sequence)
    return StreamFrame(header, payload)


class NetworkSource(FrameSource):
    """Frames arriving over a connected socket; single pass only."""

    replayable = False

    def __init__(self, sock_file):
        self._file = sock_file
        self._schema: Optional[ColumnFileHeader] = None
        self._pending: List[StreamFrame] = []
        self._consumed = False
        self._last_sequence = -1

    def _next_frame(self) -> Optional[StreamFrame]:
        frame = read_frame(self._file, self._last_sequence)
        if frame is not None:
            self._last_sequence = frame.header.sequence
        return frame

    def schema(self) -> ColumnFileHeader:
        if self._schema is None:
            frame = self._next_frame()
            if frame is None:
                raise ProtocolError("stream ended before schema frame")
            if frame.header.frame_type == FrameType.ERROR:
                raise RemoteError(frame.payload.decode("utf-8", "replace"))
            if (frame.header.frame_type != FrameType.DATA
                    or frame.header.column_index != SCHEMA_COLUMN):
                raise ProtocolError(
                    "first stream frame must carry the schema",
                    sequence=frame.header.sequence)
            self._schema = ColumnFileHeader.decode(frame.payload)
            self._pending.append(frame)
        return self._schema

    def frames(self, slot_id: int = 0) -> Iterator[StreamFrame]:
        if self._consumed:
            raise CapabilityError("network source cannot be replayed")
        self._consumed = True
        self.schema()
        while self._pending:
            yield self._pending.pop(0)
        while True:
            frame = self._next_frame()
            if frame is None:
                raise ProtocolError(
                    "stream ended without END frame",
                    sequence=self._last_sequence)
            if frame.header.frame_type == FrameType.ERROR:
                raise RemoteError(frame.payload.decode("utf-8", "replace"))
            yield frame
            if frame.header.frame_type == FrameType.END:
                return


class NetworkClientSource(NetworkSource):
    """Connects to an endpoint that streams one file and closes."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        super().__init__(self._sock.makefile("rb"))

    def close(self):
        try:
            self._file.close()
        finally:
            self._sock.close()


class SpoolingSource(FrameSource):
    """Relays a single-pass stream while writing it to a columnar file.

    After one full pass the spool file is a byte-exact image of the
    stream's file layout, so a FileSource over it provides pass two.
    """

    replayable = False

    def __init__(self, inner: FrameSource, spool_path):
        self.inner = inner
        self.spool_path = Path(spool_path)

    def schema(self) -> ColumnFileHeader:
        return self.inner.schema()

    def frames(self, slot_id: int = 0) -> Iterator[StreamFrame]:
        with open(self.spool_path, "wb") as spool:
            for frame in self.inner.frames(slot_id):
                if frame.header.frame_type == FrameType.DATA:
                    spool.write(frame.payload)  # schema payload is the header
                yield frame


def open_source(locator, max_payload: int = MAX_PAYLOAD) -> FrameSource:
    """Uniform constructor over file paths, memory, batches, and endpoints."""
    if isinstance(locator, FrameSource):
        return locator
    if isinstance(locator, ColumnBatch):
        return BatchSource(locator, max_payload)
    if isinstance(locator, (bytes, bytearray, memoryview)):
        return BytesSource(bytes(locator), max_payload)
    if isinstance(locator, tuple) and len(locator) == 2:
        return NetworkClientSource(locator[0], int(locator[1]))
    if isinstance(locator, (str, Path)):
        text = str(locator)
        if text.startswith("tcp://"):
            host, _, port = text[6:].rpartition(":")
            return NetworkClientSource(host, int(port))
        return FileSource(locator, max_payload)
    raise CapabilityError(f"cannot open source from {type(locator).__name__}")


def collect_frames(frames: Iterable[StreamFrame]) -> ColumnBatch:
    """Reassemble a frame stream into a batch (deframe identity)."""
    schema: Optional[ColumnFileHeader] = None
    chunks: Dict[int, List[bytes]] = {}
    for frame in frames:
        ftype = frame.header.frame_type
        if ftype == FrameType.END:
            break
        if ftype == FrameType.ERROR:
            raise RemoteError(frame.payload.decode("utf-8", "replace"))
        if ftype != FrameType.DATA:
            continue
        if frame.header.column_index == SCHEMA_COLUMN:
            schema = ColumnFileHeader.decode(frame.payload)
            continue
        if schema is None:
            raise ProtocolError("data frame before schema frame",
                                sequence=frame.header.sequence)
        chunks.setdefault(frame.header.column_index, []).append(frame.payload)
    if schema is None:
        raise ProtocolError("stream carried no schema frame")
    body = bytearray(schema.encode())
    for col in range(schema.column_count):
        got = b"".join(chunks.get(col, []))
        want = schema.column_bytes(col)
        if len(got) != want:
            raise TruncatedFileError(
                f"column {col} reassembled to {len(got)} bytes, expected {want}",
                column_index=col)
        body.extend(got)
    return read_column_file(io.BytesIO(bytes(body)))


class Arbiter:
    """Demultiplexes an interleaved frame stream into per-slot substreams.

    Within a slot, frames are delivered in sequence order; arrivals
    reordered within ``window`` are buffered and released in order, a
    gap of ``window`` or more is a protocol error.
    """

    def __init__(self, window: int, first_sequence: int = 0):
        if window < 1:
            raise ProtocolError(f"reorder window must be >= 1, got {window}")
        self.window = window
        self.first_sequence = first_sequence
        self._next: Dict[int, int] = {}
        self._held: Dict[int, Dict[int, StreamFrame]] = {}

    def push(self, frame: StreamFrame) -> List[StreamFrame]:
        """Feed one arrival; returns frames now deliverable for its slot."""
        slot = frame.header.slot_id
        seq = frame.header.sequence
        nxt = self._next.setdefault(slot, self.first_sequence)
        held = self._held.setdefault(slot, {})
        if seq < nxt or seq in held:
            raise ProtocolError(
                f"duplicate frame {seq} for slot {slot}", sequence=seq,
                expected=nxt, actual=seq)
        if seq - nxt >= self.window and seq != nxt:
            raise ProtocolError(
                f"sequence gap for slot {slot}: expected {nxt}, got {seq}",
                sequence=seq, expected=nxt, actual=seq)
        held[seq] = frame
        out: List[StreamFrame] = []
        while nxt in held:
            out.append(held.pop(nxt))
            nxt += 1
        self._next[slot] = nxt
        return out

    def pending(self, slot_id: int) -> int:
        return len(self._held.get(slot_id, {}))


def arbitrate(frames: Iterable[StreamFrame], window: int,
              first_sequence: int = 0) -> Dict[int, List[StreamFrame]]:
    """Batch wrapper over Arbiter: full per-slot ordered substreams."""
    arb = Arbiter(window, first_sequence)
    out: Dict[int, List[StreamFrame]] = {}
    for frame in frames:
        for ready in arb.push(frame):
            out.setdefault(ready.header.slot_id, []).append(ready)
    for slot, held in arb._held.items():
        if held:
            nxt = arb._next[slot]
            raise ProtocolError(
                f"stream ended with slot {slot} missing frame {nxt}",
                expected=nxt, actual=min(held))
    return out


def measure_source_throughput(locator, duration: float = 0.5,
                              trials: int = 5) -> Dict[str, float]:
    """Sustained frame-payload read rate; mean and stdev across trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rates = []
    for _ in range(trials):
        source = open_source(locator)
        consumed = 0
        start = time.perf_counter()
        elapsed = 0.0
        while elapsed < duration:
            for frame in source.frames():
                consumed += len(frame.payload)
                elapsed = time.perf_counter() - start
                if elapsed >= duration:
                    break
            else:
                elapsed = time.perf_counter() - start
                if not source.replayable or consumed == 0:
                    break
                continue
            break
        elapsed = max(time.perf_counter() - start, 1e-9)
        rates.append(consumed / elapsed)
    return {
        "bytes_per_second_mean": statistics.fmean(rates),
        "bytes_per_second_stdev": statistics.pstdev(rates) if len(rates) > 1 else 0.0,
        "trials": float(trials),
    }


def serve_file_once(path, host: str = "127.0.0.1", port: int = 0):
    """Test helper: serve one file's frame stream to a single connection.

    Returns (host, port, thread); the thread exits after one client.
    """
    listener = socket.create_server((host, port))
    bound = listener.getsockname()

    def _serve():
        try:
            conn, _ = listener.accept()
            try:
                wfile = conn.makefile("wb")
                for frame in FileSource(path).frames():
                    wfile.write(frame.encode())
                wfile.flush()
            finally:
                conn.close()
        finally:
            listener.close()

    thread = threading.Thread(target=_serve, name="serve-file-once", daemon=True)
    thread.start()
    return bound[0], bound[1], thread
