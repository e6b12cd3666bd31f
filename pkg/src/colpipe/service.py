"""Network-attached preprocessing service and its in-process client.

Session protocol over a reliable byte stream, all frames as defined in
``transport``:

  client -> CONFIG (payload: pipeline description text, UTF-8)
  server -> ACK, or ERROR (payload "BUSY: ..." when no slot is free)
  client -> schema frame, DATA frames per column, END
  server -> schema frame, DATA frames per column, END
  either -> ERROR (payload: UTF-8 message with row/column attribution)

One session occupies one engine slot for its whole lifetime. Stateful
pipelines spool the incoming stream to a temporary columnar file while
pass one runs, then replay the spool for pass two; the client stays
single-pass.
"""

from __future__ import annotations

import os
import socket
import tempfile
import threading
from pathlib import Path
from queue import Empty, Queue
from typing import Iterator, Optional

from .errors import (ColpipeError, ProtocolError, RemoteError,
                     ServerBusyError)
from .pipeline import Engine, EngineConfig, compile_spec
from .transport import (FrameType, NetworkSource, StreamFrame, collect_frames,
                        make_frame, open_source, read_frame)

SPOOL_DIR_ENV = "COLPIPE_SPOOL_DIR"
BUSY_PREFIX = "BUSY: "


def _send(wfile, frame: StreamFrame) -> None:
    wfile.write(frame.encode())
    wfile.flush()


class PreprocessService:
    """Accepts up to slot_count concurrent sessions, one slot per session."""

    def __init__(self, config: Optional[EngineConfig] = None,
                 host: str = "127.0.0.1", port: int = 0,
                 spool_dir: Optional[str] = None):
        self.engine = Engine(config)
        self.host = host
        self.port = port
        env_dir = os.environ.get(SPOOL_DIR_ENV)
        self.spool_dir = Path(spool_dir or env_dir or tempfile.gettempdir())
        self._listener: Optional[socket.socket] = None
        self._acceptor: Optional[threading.Thread] = None
        self._sessions: list = []
        self._sessions_lock = threading.Lock()
        self._free_slots: Queue = Queue()
        for slot in self.engine.slots:
            self._free_slots.put(slot.slot_id)
        self._stopping = threading.Event()

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        self._listener = socket.create_server((self.host, self.port))
        # closing a socket does not reliably wake a blocked accept();
        # poll with a short timeout so stop() returns promptly
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._acceptor = threading.Thread(target=self._accept_loop,
                                          name="service-acceptor", daemon=True)
        self._acceptor.start()
        return self.host, self.port

    def stop(self, graceful: bool = True, timeout: float = 10.0) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        if not graceful:
            with self._sessions_lock:
                active = list(self._sessions)
            for session in active:
                session.interrupt()
        with self._sessions_lock:
            active = list(self._sessions)
        for session in active:
            session.thread.join(timeout=timeout)
        if self._acceptor is not None:
            self._acceptor.join(timeout=timeout)

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop(graceful=False)

    def free_slot_count(self) -> int:
        return self._free_slots.qsize()

    # -- internals -----------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            try:
                slot_id = self._free_slots.get_nowait()
            except Empty:
                self._reject_busy(conn)
                continue
            session = _Session(self, conn, slot_id)
            with self._sessions_lock:
                self._sessions.append(session)
            session.thread.start()

    def _reject_busy(self, conn: socket.socket) -> None:
        try:
            wfile = conn.makefile("wb")
            message = (f"{BUSY_PREFIX}all {self.engine.config.slot_count} "
                       "slots are in use").encode()
            _send(wfile, make_frame(FrameType.ERROR, 0, 0, 0, message))
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _session_done(self, session: "_Session") -> None:
        with self._sessions_lock:
            if session in self._sessions:
                self._sessions.remove(session)
        self._free_slots.put(session.slot_id)


class _Session:
    """One connection bound to one slot, run on its own thread."""

    def __init__(self, service: PreprocessService, conn: socket.socket,
                 slot_id: int):
        self.service = service
        self.conn = conn
        self.slot_id = slot_id
        self.phase = "configuring"
        self.thread = threading.Thread(target=self._run,
                                       name=f"session-slot-{slot_id}",
                                       daemon=True)
        self._interrupted = threading.Event()
        self._rfile = conn.makefile("rb")
        self._wfile = conn.makefile("wb")
        # one writer, one lock: interrupt() must never interleave a frame
        # into the middle of a streaming write
        self._wlock = threading.Lock()

    def _send_frame(self, frame: StreamFrame, flush: bool = True) -> None:
        with self._wlock:
            self._wfile.write(frame.encode())
            if flush:
                self._wfile.flush()

    def interrupt(self) -> None:
        """Hard stop: tell the client and tear the connection down."""
        self._interrupted.set()
        try:
            self._send_frame(make_frame(FrameType.ERROR, self.slot_id, 0, 0,
                                        b"server stopped mid-stream"))
        except OSError:
            pass
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def _run(self) -> None:
        handle = None
        try:
            first = read_frame(self._rfile)
            if first is None:
                return
            if first.header.frame_type != FrameType.CONFIG:
                self._send_frame(
                    make_frame(FrameType.ERROR, self.slot_id, 0, 0,
                               b"unconfigured session: first frame must "
                               b"be CONFIG"))
                return
            try:
                spec = compile_spec(first.payload.decode("utf-8"))
                self.service.engine.reconfigure(self.slot_id, spec,
                                                deadline=5.0)
            except (ColpipeError, UnicodeDecodeError) as exc:
                self._send_frame(make_frame(FrameType.ERROR, self.slot_id, 0, 0,
                                            f"bad CONFIG: {exc}".encode()))
                return
            self._send_frame(make_frame(FrameType.ACK, self.slot_id, 0, 0))
            source = NetworkSource(self._rfile)
            self.phase = "pass1" if spec.stateful else "streaming"
            handle = self.service.engine.run(
                self.slot_id, source, spool_dir=str(self.service.spool_dir))
            for frame in handle.frames():
                if self._interrupted.is_set():
                    handle.cancel()
                    return
                if spec.stateful and frame.header.frame_type == FrameType.DATA:
                    self.phase = "pass2"
                self._send_frame(frame, flush=False)
            with self._wlock:
                self._wfile.flush()
            self.phase = "closed"
        except ColpipeError as exc:
            self._send_error(str(exc))
        except OSError:
            pass  # client went away; nothing to report to
        finally:
            if handle is not None:
                handle.cancel()
            try:
                self.conn.close()
            except OSError:
                pass
            self.service._session_done(self)

    def _send_error(self, message: str) -> None:
        try:
            self._send_frame(make_frame(FrameType.ERROR, self.slot_id, 0, 0,
                                        message.encode()))
        except OSError:
            pass


def serve(host: str = "127.0.0.1", port: int = 0,
          config: Optional[EngineConfig] = None,
          spool_dir: Optional[str] = None) -> PreprocessService:
    """Start a service and return its handle (host/port bound)."""
    service = PreprocessService(config, host, port, spool_dir=spool_dir)
    service.start()
    return service


# ---------------------------------------------------------------------------
# in-process client (the loopback half used by tests and the CLI)

class ClientSession:
    """Single-connection client: CONFIG handshake, stream in, stream out."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._rfile = self._sock.makefile("rb")
        self._wfile = self._sock.makefile("wb")
        self._writer: Optional[threading.Thread] = None
        self._writer_error: Optional[BaseException] = None
        self._last_sequence = -1
        self.state = "open"

    def close(self) -> None:
        self.state = "done"
        for closer in (self._rfile.close, self._wfile.close, self._sock.close):
            try:
                closer()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self._writer is not None:
            self._writer.join(timeout=5.0)
        self.close()

    def configure(self, pipeline_text: str) -> None:
        _send(self._wfile, make_frame(FrameType.CONFIG, 0, 0, 0,
                                      pipeline_text.encode()))
        reply = read_frame(self._rfile)
        if reply is None:
            raise ProtocolError("connection closed during CONFIG handshake")
        if reply.header.frame_type == FrameType.ERROR:
            self._raise_remote(reply)
        if reply.header.frame_type != FrameType.ACK:
            raise ProtocolError(
                f"expected ACK after CONFIG, got frame type "
                f"{reply.header.frame_type}")

    def _raise_remote(self, frame: StreamFrame) -> None:
        message = frame.payload.decode("utf-8", "replace")
        if message.startswith(BUSY_PREFIX):
            raise ServerBusyError(message)
        raise RemoteError(message)

    def _write_source(self, source) -> None:
        try:
            for frame in source.frames():
                self._wfile.write(frame.encode())
            self._wfile.flush()
        except BaseException as exc:  # reader side surfaces the real cause
            self._writer_error = exc

    def stream(self, source) -> Iterator[StreamFrame]:
        """Send the source's frames; yield the processed frames back."""
        source = open_source(source)
        self.state = "streaming"
        self._writer = threading.Thread(target=self._write_source,
                                        args=(source,), name="client-writer",
                                        daemon=True)
        self._writer.start()
        while True:
            frame = read_frame(self._rfile, self._last_sequence)
            if frame is None:
                raise ProtocolError(
                    "server closed the connection mid-stream after frame "
                    f"{self._last_sequence}", sequence=self._last_sequence)
            if frame.header.frame_type == FrameType.ERROR:
                self._raise_remote(frame)
            self._last_sequence = frame.header.sequence
            yield frame
            if frame.header.frame_type == FrameType.END:
                break
        self._writer.join(timeout=5.0)
        if self._writer_error is not None and not isinstance(
                self._writer_error, (BrokenPipeError, ConnectionError)):
            raise self._writer_error
        self.state = "done"


def preprocess_remote(endpoint, pipeline_text: str,
                      source) -> Iterator[StreamFrame]:
    """One-shot remote run; yields the server's output frames in order."""
    host, port = endpoint
    with ClientSession(host, port) as session:
        session.configure(pipeline_text)
        yield from session.stream(source)


def preprocess_remote_batch(endpoint, pipeline_text: str, source):
    """Convenience wrapper collecting the output stream into a batch."""
    return collect_frames(preprocess_remote(endpoint, pipeline_text, source))
