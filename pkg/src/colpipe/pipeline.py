"""Pipeline specs, MiniPipe slots, and the streaming execution engine.

A pipeline is a pair of operator chains (dense and sparse) plus
parameters. The engine owns N slots; each slot runs one job at a time
as a small thread pipeline: a feeder moves source frames into a bounded
queue, the job thread applies the block kernels frame by frame and
pushes results into a bounded output queue. Slots share nothing; a
slot's vocabulary state lives on the slot and is wiped on reconfigure.

Stateful pipelines make two passes: pass one builds one vocabulary
table per sparse column, pass two re-derives the bounded values and
maps them to indices while the dense chain runs.
"""

from __future__ import annotations

import itertools
import tempfile
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from queue import Empty, Full, Queue
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .colfmt import (SPARSE_HEX, SPARSE_U32, ColumnBatch,
                     ColumnFileHeader)
from .errors import (CapabilityError, ColpipeError, FormatError,
                     JobAbortedError, ProtocolError, ReconfigureTimeoutError,
                     RemoteError, SchedulingError, SpecError)
from .transport import (MAX_PAYLOAD, SCHEMA_COLUMN, ColumnSlab, FrameSource,
                        FrameType, StreamFrame, collect_frames,
                        full_frame_bytes, make_frame, open_source)

DENSE_DTYPE = np.dtype("<f4")
VALUE_DTYPE = np.dtype("<u8")
INDEX_DTYPE = np.dtype("<u4")


@dataclass(frozen=True)
class OperatorParams:
    """Shared operator parameters: modulus range and hex token width."""

    modulus: int = 8192
    token_width: int = 8

    def __post_init__(self):
        if self.modulus < 1:
            raise SpecError(f"modulus must be >= 1, got {self.modulus}")
        if not 1 <= self.token_width <= 16:
            raise SpecError(
                f"token_width must be in 1..16, got {self.token_width}")


_SPARSE_ORDER = {name: i for i, name in enumerate(ops.SPARSE_OPS)}


@dataclass(frozen=True)
class PipelineSpec:
    """Validated, ordered operator chains for one pipeline."""

    id: str
    dense_chain: Tuple[str, ...]
    sparse_chain: Tuple[str, ...]
    params: OperatorParams = OperatorParams()
    stateful: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dense_chain", tuple(self.dense_chain))
        object.__setattr__(self, "sparse_chain", tuple(self.sparse_chain))
        self.validate()

    def validate(self) -> None:
        for op in self.dense_chain:
            if op not in ops.DENSE_OPS:
                raise SpecError(f"unknown dense operator {op!r}")
        for op in self.sparse_chain:
            if op not in ops.SPARSE_OPS:
                raise SpecError(f"unknown sparse operator {op!r}")
        for chain in (self.dense_chain, self.sparse_chain):
            if len(set(chain)) != len(chain):
                raise SpecError(f"duplicate operator in chain {chain}")
        order = [_SPARSE_ORDER[op] for op in self.sparse_chain]
        if order != sorted(order):
            raise SpecError(
                f"misordered sparse chain {self.sparse_chain}: required order "
                f"is {ops.SPARSE_OPS}")
        present = set(self.sparse_chain)
        if ("modulus" in present) and ("hex2int" not in present):
            raise SpecError("modulus requires hex2int earlier in the chain")
        if present & {"vocab_gen", "vocab_map"}:
            if "modulus" not in present:
                raise SpecError("vocabulary operators require modulus "
                                "earlier in the chain")
        if "vocab_map" in present and "vocab_gen" not in present:
            raise SpecError("vocab_map requires vocab_gen earlier in the chain")
        wants_state = bool(present & {"vocab_gen", "vocab_map"})
        if self.stateful != wants_state:
            raise SpecError(
                f"stateful flag {self.stateful} inconsistent with chain "
                f"{self.sparse_chain}")


def _preset(pid: str, modulus: int, stateful: bool) -> PipelineSpec:
    sparse = ("hex2int", "modulus")
    if stateful:
        sparse += ("vocab_gen", "vocab_map")
    return PipelineSpec(id=pid, dense_chain=("neg2zero", "logarithm"),
                        sparse_chain=sparse,
                        params=OperatorParams(modulus=modulus),
                        stateful=stateful)


# P-I keeps the small modulus as its range bound; only P-II/P-III carry
# vocabularies (small and large).
PRESETS: Dict[str, PipelineSpec] = {
    "P-I": _preset("P-I", modulus=8192, stateful=False),
    "P-II": _preset("P-II", modulus=8192, stateful=True),
    "P-III": _preset("P-III", modulus=524288, stateful=True),
}


def compile_spec(description: str) -> PipelineSpec:
    """Build a spec from a preset name or a small key/value text format.

    The text format is one ``key = value`` per line; keys are ``id``,
    ``dense``, ``sparse`` (comma-separated operator names), ``modulus``
    and ``token_width``. ``#`` starts a comment.
    """
    text = description.strip()
    if not text:
        raise SpecError("empty pipeline description")
    if "\n" not in text and "=" not in text:
        key = text.upper()
        if key in PRESETS:
            return PRESETS[key]
        raise SpecError(
            f"unknown pipeline preset {text!r}; valid presets: "
            f"{', '.join(PRESETS)}")
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if key in fields:
            raise SpecError(f"line {lineno}: duplicate key {key!r}")
        fields[key] = value
    unknown = set(fields) - {"id", "dense", "sparse", "modulus", "token_width"}
    if unknown:
        raise SpecError(f"unknown keys in pipeline description: {sorted(unknown)}")

    def _chain(value: str) -> Tuple[str, ...]:
        parts = [p.strip() for p in value.replace(",", " ").split()]
        return tuple(p for p in parts if p)

    try:
        params = OperatorParams(
            modulus=int(fields.get("modulus", OperatorParams.modulus)),
            token_width=int(fields.get("token_width", OperatorParams.token_width)))
    except ValueError as exc:
        raise SpecError(f"bad numeric parameter: {exc}") from None
    dense = _chain(fields.get("dense", ""))
    sparse = _chain(fields.get("sparse", ""))
    stateful = bool({"vocab_gen", "vocab_map"} & set(sparse))
    return PipelineSpec(id=fields.get("id", "custom"), dense_chain=dense,
                        sparse_chain=sparse, params=params, stateful=stateful)


class SlotStatus(Enum):
    IDLE = "idle"
    RUNNING = "running"
    QUIESCING = "quiescing"
    QUARANTINED = "quarantined"


_STATUS_EDGES = {
    SlotStatus.IDLE: {SlotStatus.RUNNING},
    SlotStatus.RUNNING: {SlotStatus.QUIESCING},
    SlotStatus.QUIESCING: {SlotStatus.IDLE},
}


class MiniPipeSlot:
    """One state-isolated pipeline unit; runs at most one job at a time."""

    def __init__(self, slot_id: int):
        self.slot_id = slot_id
        self.spec: Optional[PipelineSpec] = None
        self.state: Dict[int, ops.VocabTable] = {}
        self.status = SlotStatus.IDLE
        self.quiesce = threading.Event()
        self._busy = threading.Lock()
        self._status_lock = threading.Lock()

    def _transition(self, new: SlotStatus) -> None:
        with self._status_lock:
            if self.status is SlotStatus.QUARANTINED:
                raise SchedulingError(f"slot {self.slot_id} is quarantined")
            if new not in _STATUS_EDGES.get(self.status, set()):
                raise SchedulingError(
                    f"slot {self.slot_id}: illegal transition "
                    f"{self.status.value} -> {new.value}")
            self.status = new

    def _quarantine(self) -> None:
        with self._status_lock:
            self.status = SlotStatus.QUARANTINED


@dataclass(frozen=True)
class EngineConfig:
    """Engine sizing: slot pool, fixed 64-byte beat, per-slot queue depth."""

    slot_count: int = 7
    beat_bytes: int = 64
    queue_depth: int = 16
    max_payload: int = MAX_PAYLOAD

    def __post_init__(self):
        if self.slot_count < 1:
            raise SpecError("slot_count must be >= 1")
        if self.beat_bytes != 64:
            raise SpecError("beat_bytes is fixed at 64")
        if self.queue_depth < 1:
            raise SpecError("queue_depth must be >= 1")
        if not 64 <= self.max_payload <= MAX_PAYLOAD:
            raise SpecError(f"max_payload must be in 64..{MAX_PAYLOAD}")


_EOF = object()
_ABORTED = object()

# Feeders merge consecutive same-column DATA payloads up to this many
# bytes per queue item: wire frames stay <= MAX_PAYLOAD, but kernels and
# queue hops work on larger batches. Bounds in-flight memory per queue
# item regardless of row count.
COALESCE_BYTES = 8 * MAX_PAYLOAD

# Pull-capable (local, replayable) sources hand the engine slabs of this
# size directly, skipping the feeder thread entirely.
SLAB_BYTES = 16 * MAX_PAYLOAD


class _Raise:
    __slots__ = ("exc",)

    def __init__(self, exc: BaseException):
        self.exc = exc


class _DataGroup:
    """One or more consecutive DATA payloads for a single column."""

    __slots__ = ("column", "payloads", "nbytes")

    def __init__(self, column: int, payloads: List[bytes], nbytes: int):
        self.column = column
        self.payloads = payloads
        self.nbytes = nbytes

    def joined(self) -> bytes:
        if len(self.payloads) == 1:
            return self.payloads[0]
        return b"".join(self.payloads)


class _FrameProcessor:
    """Applies one pipeline pass to a frame stream.

    Modes: "stateless" (single emitting pass), "gen" (pass one, builds
    vocabularies, emits nothing), "map" (pass two, emits everything).
    """

    def __init__(self, spec: PipelineSpec, state: Dict[int, ops.VocabTable],
                 mode: str, slot_id: int, max_payload: int):
        self.spec = spec
        self.state = state
        self.mode = mode
        self.slot_id = slot_id
        self.max_payload = max_payload
        self.schema: Optional[ColumnFileHeader] = None
        self.out_schema: Optional[ColumnFileHeader] = None
        self._seq = itertools.count()
        self._col_bytes: Dict[int, int] = {}
        self._rows_done: Dict[int, int] = {}
        self._current_col = -1
        self._sparse_prefix = tuple(op for op in spec.sparse_chain
                                    if op in ("hex2int", "modulus"))
        self._has_gen = "vocab_gen" in spec.sparse_chain
        self._has_map = "vocab_map" in spec.sparse_chain
        self.saw_end = False

    # -- helpers ---------------------------------------------------------

    def _emit(self, column: int, payload: bytes) -> StreamFrame:
        return make_frame(FrameType.DATA, self.slot_id, column,
                          next(self._seq), payload)

    def _emit_array(self, column: int, arr: np.ndarray) -> List[StreamFrame]:
        raw = np.ascontiguousarray(arr).tobytes()
        width = arr.dtype.itemsize
        limit = full_frame_bytes(width, self.max_payload)
        return [self._emit(column, raw[off:off + limit])
                for off in range(0, len(raw), limit)] if raw else []

    def _attach_column(self, exc: ColpipeError, column: int) -> ColpipeError:
        exc.column_index = column
        if exc.args:
            exc.args = (f"column {column}: {exc.args[0]}",) + exc.args[1:]
        return exc

    # -- schema ----------------------------------------------------------

    def _on_schema(self, frame: StreamFrame) -> List[StreamFrame]:
        if self.schema is not None:
            raise ProtocolError("duplicate schema frame",
                                sequence=frame.header.sequence)
        schema = ColumnFileHeader.decode(frame.payload)
        if self.spec.sparse_chain and schema.sparse_count:
            if schema.sparse_kind != SPARSE_HEX:
                raise SpecError(
                    "sparse chain expects hex tokens but the input carries "
                    "uint32 columns")
            if schema.token_width != self.spec.params.token_width:
                raise SpecError(
                    f"input token width {schema.token_width} does not match "
                    f"pipeline token width {self.spec.params.token_width}")
        self.schema = schema
        if self.mode == "gen":
            return []
        if self.spec.sparse_chain:
            out_kind, out_width = SPARSE_U32, 4
        else:
            out_kind, out_width = schema.sparse_kind, schema.token_width
        self.out_schema = ColumnFileHeader(
            dense_count=schema.dense_count, sparse_count=schema.sparse_count,
            token_width=out_width, row_count=schema.row_count,
            sparse_kind=out_kind)
        return [self._emit(SCHEMA_COLUMN, self.out_schema.encode())]

    # -- column data -----------------------------------------------------

    def _dense(self, arr: np.ndarray, row_offset: int,
               column: int) -> np.ndarray:
        for op in self.spec.dense_chain:
            if op == "neg2zero":
                arr = ops.neg2zero_block(arr)
            else:
                arr = ops.logarithm_block(arr, row_offset=row_offset)
        return arr

    def _sparse(self, arr: np.ndarray, row_offset: int,
                column: int) -> Optional[np.ndarray]:
        for op in self._sparse_prefix:
            if op == "hex2int":
                arr = ops.hex2int_block(arr, row_offset=row_offset)
            else:
                arr = ops.modulus_block(arr, self.spec.params.modulus)
        if self.mode == "gen":
            if self._has_gen:
                table = self.state.get(column)
                if table is None:
                    table = self.state[column] = ops.VocabTable(
                        self.spec.params.modulus)
                table.absorb_block(arr, row_offset=row_offset)
            return None
        if self._has_map:
            table = self.state.get(column)
            if table is None:
                raise ProtocolError(
                    f"no vocabulary table for column {column}; pass one did "
                    "not see this column")
            return table.lookup_block(arr, row_offset=row_offset)
        if arr.dtype == VALUE_DTYPE:
            if len(arr) and arr.max() > 0xFFFFFFFF:
                raise FormatError(
                    "sparse output value exceeds uint32 range; add a modulus "
                    "below 2**32 to the chain")
            return arr.astype(INDEX_DTYPE)
        return arr  # empty sparse chain: tokens pass through untouched

    def _on_data(self, column: int, payload: bytes,
                 sequence: int = -1) -> List[StreamFrame]:
        if self.schema is None:
            raise ProtocolError("data frame before schema frame",
                                sequence=sequence)
        col = column
        schema = self.schema
        if col >= schema.column_count:
            raise ProtocolError(f"column index {col} out of range",
                                sequence=sequence)
        if col < self._current_col:
            raise ProtocolError(
                f"column {col} arrived after column {self._current_col}",
                sequence=sequence)
        self._current_col = col
        width = schema.column_byte_width(col)
        if len(payload) % width:
            raise ProtocolError(
                f"column {col} frame of {len(payload)} bytes splits "
                f"{width}-byte elements", sequence=sequence)
        row_offset = self._rows_done.get(col, 0)
        count = len(payload) // width
        self._rows_done[col] = row_offset + count
        self._col_bytes[col] = self._col_bytes.get(col, 0) + len(payload)
        if self._col_bytes[col] > schema.column_bytes(col):
            raise ProtocolError(
                f"column {col} received more bytes than the schema promised",
                sequence=sequence)
        try:
            if col < schema.dense_count:
                if self.mode == "gen":
                    return []
                arr = np.frombuffer(payload, dtype=DENSE_DTYPE)
                out = self._dense(arr, row_offset, col)
            else:
                dtype = (np.dtype(f"S{schema.token_width}")
                         if schema.sparse_kind == SPARSE_HEX else INDEX_DTYPE)
                arr = np.frombuffer(payload, dtype=dtype)
                out = self._sparse(arr, row_offset, col)
        except ColpipeError as exc:
            raise self._attach_column(exc, col)
        if out is None:
            return []
        return self._emit_array(col, out)

    def process_group(self, group: _DataGroup) -> List[StreamFrame]:
        return self._on_data(group.column, group.joined())

    def process_slab(self, slab) -> List[StreamFrame]:
        return self._on_data(slab.column, slab.payload)

    def _on_end(self, frame: StreamFrame) -> List[StreamFrame]:
        if self.schema is None:
            raise ProtocolError("END before schema frame",
                                sequence=frame.header.sequence)
        for col in range(self.schema.column_count):
            want = self.schema.column_bytes(col)
            got = self._col_bytes.get(col, 0)
            if got != want:
                raise ProtocolError(
                    f"stream ended with column {col} at {got}/{want} bytes",
                    sequence=frame.header.sequence)
        self.saw_end = True
        if self.mode == "gen":
            for table in self.state.values():
                table.freeze()
            return []
        return [make_frame(FrameType.END, self.slot_id, 0, next(self._seq))]

    def process(self, frame: StreamFrame) -> List[StreamFrame]:
        ftype = frame.header.frame_type
        if ftype == FrameType.DATA:
            if frame.header.column_index == SCHEMA_COLUMN:
                return self._on_schema(frame)
            return self._on_data(frame.header.column_index, frame.payload,
                                 frame.header.sequence)
        if ftype == FrameType.END:
            return self._on_end(frame)
        if ftype == FrameType.ERROR:
            raise RemoteError(frame.payload.decode("utf-8", "replace"))
        raise ProtocolError(
            f"unexpected frame type {ftype} in data stream",
            sequence=frame.header.sequence)


class JobHandle:
    """Consumer view of a running job: a stream of output frames."""

    def __init__(self, job: "_Job"):
        self._job = job
        self.slot_id = job.slot.slot_id

    def frames(self) -> Iterator[StreamFrame]:
        job = self._job
        try:
            while True:
                item = job.out_q.get()
                if item is _ABORTED:
                    raise JobAbortedError(
                        f"job on slot {self.slot_id} aborted by reconfigure")
                if isinstance(item, _Raise):
                    raise item.exc
                for frame in item:  # workers enqueue lists of frames
                    yield frame
                    if frame.header.frame_type == FrameType.END:
                        return
        finally:
            job.finish_consumer()

    def collect(self) -> ColumnBatch:
        return collect_frames(self.frames())

    def to_file(self, path) -> int:
        """Stream output frames straight into a columnar file."""
        written = 0
        with open(path, "wb") as fh:
            for frame in self.frames():
                if frame.header.frame_type != FrameType.DATA:
                    continue
                fh.write(frame.payload)
                written += len(frame.payload)
        return written

    def drain(self) -> int:
        """Consume and discard all output; returns payload bytes seen."""
        total = 0
        for frame in self.frames():
            total += len(frame.payload)
        return total

    def cancel(self) -> None:
        self._job.stop.set()
        self._job.finish_consumer()

    @property
    def stats(self) -> "JobStats":
        return self._job.stats()


@dataclass
class JobStats:
    slot_id: int
    pipeline_id: str
    bytes_in: int
    bytes_out: int
    rows: int
    seconds: float

    @property
    def bytes_per_second(self) -> float:
        return self.bytes_in / self.seconds if self.seconds > 0 else 0.0


class _Job:
    """Owns the slot for the duration of one (possibly two-pass) run."""

    def __init__(self, engine: "Engine", slot: MiniPipeSlot,
                 passes: Sequence[Tuple[str, FrameSource]],
                 cleanup: Optional[Path] = None, fresh_state: bool = False):
        self.engine = engine
        self.slot = slot
        self.passes = list(passes)
        self.cleanup = cleanup
        self.fresh_state = fresh_state
        self.out_q: Queue = Queue(engine.config.queue_depth)
        self.stop = threading.Event()       # consumer cancelled
        self.failed = threading.Event()     # processing raised; stop feeding
        self.drained = threading.Event()    # job thread fully exited
        self.bytes_in = 0
        self.bytes_out = 0
        self.rows = 0
        self.started = 0.0
        self.finished = 0.0
        self._thread: Optional[threading.Thread] = None

    # -- lifecycle -------------------------------------------------------

    def start(self) -> None:
        slot = self.slot
        if not slot._busy.acquire(blocking=False):
            raise SchedulingError(f"slot {slot.slot_id} is busy")
        try:
            slot._transition(SlotStatus.RUNNING)
        except SchedulingError:
            slot._busy.release()
            raise
        if self.fresh_state:
            slot.state.clear()
        self.started = time.perf_counter()
        self._thread = threading.Thread(
            target=self._run, name=f"slot-{slot.slot_id}-job", daemon=True)
        self._thread.start()

    def _interrupted(self) -> bool:
        return (self.stop.is_set() or self.failed.is_set()
                or self.slot.quiesce.is_set())

    def _out_put(self, item) -> None:
        while not self.stop.is_set():
            try:
                self.out_q.put(item, timeout=0.05)
                return
            except Full:
                if self.slot.status is SlotStatus.QUARANTINED:
                    return  # nobody is listening anymore

    def _put_resilient(self, in_q: Queue, item) -> bool:
        while True:
            if self.failed.is_set() or self.stop.is_set():
                return False
            try:
                in_q.put(item, timeout=0.05)
                return True
            except Full:
                continue

    def _feed(self, source: FrameSource, in_q: Queue, done: List[bool]) -> None:
        pending: List[bytes] = []
        pending_col = -1
        pending_bytes = 0

        def flush() -> bool:
            nonlocal pending, pending_bytes
            if not pending:
                return True
            ok = self._put_resilient(
                in_q, _DataGroup(pending_col, pending, pending_bytes))
            pending = []
            pending_bytes = 0
            return ok

        try:
            for frame in source.frames(slot_id=self.slot.slot_id):
                if self._interrupted():
                    break
                header = frame.header
                if (header.frame_type == FrameType.DATA
                        and header.column_index != SCHEMA_COLUMN):
                    if pending and (pending_col != header.column_index
                                    or pending_bytes >= COALESCE_BYTES):
                        if not flush():
                            break
                    pending_col = header.column_index
                    pending.append(frame.payload)
                    pending_bytes += len(frame.payload)
                    continue
                if not flush() or not self._put_resilient(in_q, frame):
                    break
            else:
                if flush():
                    done[0] = True
        except Exception as exc:  # source failures surface on the consumer
            self._put_resilient(in_q, _Raise(exc))
        finally:
            self._put_resilient(in_q, _EOF)

    def _run_pass(self, mode: str, source: FrameSource) -> bool:
        """Returns True if the pass was cut short by quiesce/cancel."""
        proc = _FrameProcessor(self.slot.spec, self.slot.state, mode,
                               self.slot.slot_id,
                               self.engine.config.max_payload)
        if source.supports_pull:
            return self._run_pass_pull(proc, source)
        return self._run_pass_push(proc, source)

    def _run_pass_pull(self, proc: _FrameProcessor,
                       source: FrameSource) -> bool:
        """Local replayable sources: the job thread reads slabs inline."""
        complete = False
        for item in source.slabs(SLAB_BYTES, slot_id=self.slot.slot_id):
            if self._interrupted():
                break
            if isinstance(item, ColumnSlab):
                self.bytes_in += len(item.payload)
                outs = proc.process_slab(item)
            else:
                outs = proc.process(item)
            if outs:
                self.bytes_out += sum(f.header.payload_len for f in outs)
                self._out_put(outs)
        else:
            complete = True
        if proc.schema is not None:
            self.rows = proc.schema.row_count
        return not (complete and proc.saw_end)

    def _run_pass_push(self, proc: _FrameProcessor,
                       source: FrameSource) -> bool:
        """Socket-backed sources: a feeder thread fills a bounded queue."""
        in_q: Queue = Queue(self.engine.config.queue_depth)
        fed_all = [False]
        feeder = threading.Thread(
            target=self._feed, args=(source, in_q, fed_all),
            name=f"slot-{self.slot.slot_id}-feeder", daemon=True)
        feeder.start()
        try:
            while True:
                try:
                    item = in_q.get(timeout=0.05)
                except Empty:
                    if self.stop.is_set() and not feeder.is_alive():
                        break  # consumer cancelled and the feeder gave up
                    continue
                if item is _EOF:
                    break
                if isinstance(item, _Raise):
                    raise item.exc
                if isinstance(item, _DataGroup):
                    self.bytes_in += item.nbytes
                    outs = proc.process_group(item)
                else:
                    outs = proc.process(item)
                if outs:
                    self.bytes_out += sum(f.header.payload_len for f in outs)
                    self._out_put(outs)
        except BaseException:
            self.failed.set()
            raise
        finally:
            feeder.join()
        if proc.schema is not None:
            self.rows = proc.schema.row_count
        return not (fed_all[0] and proc.saw_end)

    def _run(self) -> None:
        aborted = False
        error: Optional[BaseException] = None
        try:
            for mode, source in self.passes:
                if self._interrupted():
                    aborted = True
                    break
                aborted = self._run_pass(mode, source)
                if aborted:
                    break
        except BaseException as exc:
            error = exc
        self.finished = time.perf_counter()
        if error is not None:
            self._out_put(_Raise(error))
        elif aborted:
            self._out_put(_ABORTED)
        try:
            self.slot._transition(SlotStatus.QUIESCING)
            self.slot._transition(SlotStatus.IDLE)
        except SchedulingError:
            pass  # slot was quarantined while we were finishing
        if self.cleanup is not None:
            try:
                self.cleanup.unlink()
            except OSError:
                pass
        self.drained.set()
        self.slot._busy.release()

    def finish_consumer(self) -> None:
        """Consumer is done; let the job thread exit without blocking."""
        if not self.drained.is_set():
            self.stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def stats(self) -> JobStats:
        end = self.finished if self.finished else time.perf_counter()
        return JobStats(slot_id=self.slot.slot_id,
                        pipeline_id=self.slot.spec.id if self.slot.spec else "",
                        bytes_in=self.bytes_in, bytes_out=self.bytes_out,
                        rows=self.rows, seconds=end - self.started)


@dataclass
class ConcurrencyReport:
    jobs: List[JobStats]
    wall_seconds: float

    @property
    def aggregate_bytes_per_second(self) -> float:
        total = sum(j.bytes_in for j in self.jobs)
        return total / self.wall_seconds if self.wall_seconds > 0 else 0.0


class Engine:
    """Multi-tenant streaming engine: N isolated MiniPipe slots."""

    def __init__(self, config: Optional[EngineConfig] = None):
        self.config = config or EngineConfig()
        self.slots = [MiniPipeSlot(i) for i in range(self.config.slot_count)]

    def slot(self, slot_id: int) -> MiniPipeSlot:
        if not 0 <= slot_id < len(self.slots):
            raise SchedulingError(
                f"slot {slot_id} does not exist (engine has "
                f"{len(self.slots)} slots)")
        return self.slots[slot_id]

    def configure_slot(self, slot_id: int,
                       spec: Union[str, PipelineSpec]) -> PipelineSpec:
        return self.reconfigure(slot_id, spec)

    def reconfigure(self, slot_id: int, new_spec: Union[str, PipelineSpec],
                    deadline: float = 0.1) -> PipelineSpec:
        """Quiesce-and-swap: drain the slot, wipe state, install the spec."""
        if isinstance(new_spec, str):
            new_spec = compile_spec(new_spec)
        elif not isinstance(new_spec, PipelineSpec):
            raise SpecError(f"not a pipeline spec: {new_spec!r}")
        slot = self.slot(slot_id)
        with slot._status_lock:
            if slot.status is SlotStatus.QUARANTINED:
                raise SchedulingError(f"slot {slot_id} is quarantined")
        slot.quiesce.set()
        acquired = slot._busy.acquire(timeout=deadline)
        if not acquired:
            slot._quarantine()
            slot.quiesce.clear()
            raise ReconfigureTimeoutError(
                f"slot {slot_id} failed to drain within {deadline}s and was "
                "quarantined", slot_id=slot_id)
        try:
            slot.state.clear()
            slot.spec = new_spec
        finally:
            slot.quiesce.clear()
            slot._busy.release()
        return new_spec

    # -- job entry points --------------------------------------------------

    def _start_job(self, slot: MiniPipeSlot,
                   passes: Sequence[Tuple[str, FrameSource]],
                   cleanup: Optional[Path] = None,
                   fresh_state: bool = False) -> JobHandle:
        job = _Job(self, slot, passes, cleanup=cleanup, fresh_state=fresh_state)
        job.start()
        return JobHandle(job)

    def run_stateless(self, slot_id: int, source) -> JobHandle:
        slot = self.slot(slot_id)
        if slot.spec is None:
            raise SpecError(f"slot {slot_id} has no pipeline configured")
        if slot.spec.stateful:
            raise SpecError(
                f"slot {slot_id} runs stateful pipeline {slot.spec.id!r}; "
                "use run_stateful")
        src = open_source(source, self.config.max_payload)
        return self._start_job(slot, [("stateless", src)])

    def run_stateful(self, slot_id: int, source,
                     spool_dir: Optional[str] = None) -> JobHandle:
        slot = self.slot(slot_id)
        if slot.spec is None:
            raise SpecError(f"slot {slot_id} has no pipeline configured")
        if not slot.spec.stateful:
            raise SpecError(
                f"slot {slot_id} runs stateless pipeline {slot.spec.id!r}; "
                "use run_stateless")
        src = open_source(source, self.config.max_payload)
        cleanup = None
        if src.replayable:
            passes = [("gen", src), ("map", src)]
        elif spool_dir is not None:
            from .transport import FileSource, SpoolingSource
            spool = Path(tempfile.mkstemp(prefix="colpipe-spool-",
                                          suffix=".col",
                                          dir=spool_dir)[1])
            passes = [("gen", SpoolingSource(src, spool)),
                      ("map", FileSource(spool, self.config.max_payload))]
            cleanup = spool
        else:
            raise CapabilityError(
                "stateful pipelines need two passes; the source is not "
                "replayable and no spool directory was given")
        return self._start_job(slot, passes, cleanup=cleanup, fresh_state=True)

    def run(self, slot_id: int, source,
            spool_dir: Optional[str] = None) -> JobHandle:
        slot = self.slot(slot_id)
        if slot.spec is None:
            raise SpecError(f"slot {slot_id} has no pipeline configured")
        if slot.spec.stateful:
            return self.run_stateful(slot_id, source, spool_dir=spool_dir)
        return self.run_stateless(slot_id, source)

    def run_concurrent(self, jobs: Sequence[Tuple[int, object]],
                       collect: str = "batch"):
        """Run independent jobs on distinct slots; returns (outputs, report).

        ``collect`` is "batch" (materialize each output), "discard"
        (drain and drop, for throughput runs), or "bytes" (raw frame
        payload concatenation per job).
        """
        if len(jobs) > self.config.slot_count:
            raise SchedulingError(
                f"{len(jobs)} jobs oversubscribe {self.config.slot_count} slots")
        slot_ids = [s for s, _ in jobs]
        if len(set(slot_ids)) != len(slot_ids):
            raise SchedulingError(f"duplicate slot ids in job list: {slot_ids}")
        outputs: List[object] = [None] * len(jobs)
        stats: List[Optional[JobStats]] = [None] * len(jobs)
        errors: List[Optional[BaseException]] = [None] * len(jobs)

        def _collect(i: int, slot_id: int, source) -> None:
            try:
                handle = self.run(slot_id, source)
                if collect == "batch":
                    outputs[i] = handle.collect()
                elif collect == "discard":
                    handle.drain()
                else:
                    outputs[i] = b"".join(
                        f.payload for f in handle.frames()
                        if f.header.frame_type == FrameType.DATA)
                stats[i] = handle.stats
            except BaseException as exc:
                errors[i] = exc

        threads = [threading.Thread(target=_collect, args=(i, s, src),
                                    name=f"collector-{i}", daemon=True)
                   for i, (s, src) in enumerate(jobs)]
        t0 = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        wall = time.perf_counter() - t0
        for exc in errors:
            if exc is not None:
                raise exc
        report = ConcurrencyReport(jobs=[s for s in stats if s is not None],
                                   wall_seconds=wall)
        return outputs, report
