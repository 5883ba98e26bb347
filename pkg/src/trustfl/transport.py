"""Frame delivery between agent endpoints.

Two interchangeable backends share one contract: ``bind`` an endpoint to a
handler, ``send`` length-prefixed frames to it, ``wait_idle`` until every
frame in flight has been handled. Each backend taps every frame into a
``CaptureLog`` so tests can sniff the wire the way a packet capture would.
"""

from __future__ import annotations

import base64
import collections
import logging
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Deque, Dict, Iterable, List, Optional, Tuple

logger = logging.getLogger(__name__)

MAX_FRAME = 16 * 1024 * 1024
_LENGTH = struct.Struct(">I")

Handler = Callable[[bytes], None]


class TransportError(Exception):
    pass


class AddressInUse(TransportError):
    pass


class Unreachable(TransportError):
    pass


class FrameTooLarge(TransportError):
    pass


@dataclass(frozen=True, order=True)
class Endpoint:
    host: str
    port: int

    def __post_init__(self) -> None:
        if not isinstance(self.port, int) or not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port!r}")
        if not self.host:
            raise ValueError("empty host")

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def uri(self) -> str:
        return f"tcp://{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        if "://" in text:
            text = text.split("://", 1)[1]
        host, _, port = text.rstrip("/").rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"not an endpoint: {text!r}")
        return cls(host, int(port))


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"{len(payload)} bytes exceeds {MAX_FRAME}")
    return _LENGTH.pack(len(payload)) + payload


@dataclass(frozen=True)
class CaptureRecord:
    ts: float
    src: Optional[Endpoint]
    dst: Endpoint
    frame: bytes

    def to_line(self) -> str:
        src = str(self.src) if self.src else "-"
        return f"{self.ts:.6f},{src},{self.dst},{base64.b64encode(self.frame).decode('ascii')}"

    @classmethod
    def from_line(cls, line: str) -> "CaptureRecord":
        ts, src, dst, data = line.strip().split(",", 3)
        return cls(float(ts), None if src == "-" else Endpoint.parse(src), Endpoint.parse(dst),
                   base64.b64decode(data, validate=True))


class CaptureLog:
    """Append-only record of every frame a transport carried."""

    def __init__(self) -> None:
        self._records: List[CaptureRecord] = []
        self._lock = threading.Lock()

    def append(self, record: CaptureRecord) -> None:
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> Tuple[CaptureRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self.records)

    def total_bytes(self) -> int:
        return sum(len(r.frame) for r in self.records)

    def export(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.export())

    @classmethod
    def load(cls, path) -> "CaptureLog":
        log = cls()
        with open(path, encoding="ascii") as fh:
            for line in fh:
                if line.strip():
                    log.append(CaptureRecord.from_line(line))
        return log


def scan_capture(log: CaptureLog, needles: Iterable[bytes]) -> List[Tuple[bytes, int]]:
    """Every (needle, frame index) occurrence of a needle inside a captured frame."""
    wanted = [n for n in dict.fromkeys(needles) if n]
    hits: List[Tuple[bytes, int]] = []
    for index, record in enumerate(log.records):
        for needle in wanted:
            pos = record.frame.find(needle)
            while pos != -1:
                hits.append((needle, index))
                pos = record.frame.find(needle, pos + 1)
    return hits


class Listener:
    def __init__(self, transport: "Transport", endpoint: Endpoint) -> None:
        self.transport = transport
        self.endpoint = endpoint

    def send(self, dest: Endpoint, payload: bytes) -> None:
        self.transport.send(dest, payload, source=self.endpoint)

    def close(self) -> None:
        self.transport.unbind(self.endpoint)


class Transport:
    """Shared bookkeeping: capture tap and in-flight accounting."""

    kind = "abstract"

    def __init__(self, capture: Optional[CaptureLog] = None, clock: Callable[[], float] = time.time) -> None:
        self.capture = capture if capture is not None else CaptureLog()
        self.clock = clock
        self._pending = 0
        self._idle = threading.Condition()

    def _record(self, source: Optional[Endpoint], dest: Endpoint, wire: bytes) -> None:
        self.capture.append(CaptureRecord(self.clock(), source, dest, wire))

    def _inc(self) -> None:
        with self._idle:
            self._pending += 1

    def _dec(self) -> None:
        with self._idle:
            self._pending -= 1
            if self._pending == 0:
                self._idle.notify_all()

    def wait_idle(self, timeout: float = 10.0) -> bool:
        """Block until no frame is in flight; False on timeout."""
        deadline = time.monotonic() + timeout
        with self._idle:
            while self._pending:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._idle.wait(remaining)
        return True

    def _dispatch(self, handler: Handler, dest: Endpoint, payload: bytes) -> None:
        try:
            handler(payload)
        except Exception:
            logger.exception("handler for %s raised", dest)
        finally:
            self._dec()

    def bind(self, endpoint: Endpoint, handler: Handler) -> Listener:
        raise NotImplementedError

    def unbind(self, endpoint: Endpoint) -> None:
        raise NotImplementedError

    def send(self, dest: Endpoint, payload: bytes, source: Optional[Endpoint] = None) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class LoopbackTransport(Transport):
    """In-process delivery, FIFO across all endpoints.

    The outermost ``send`` drains the queue in the caller's thread; frames
    sent from inside a handler are queued behind it, so handlers never
    re-enter and delivery order is a pure function of the send order.
    """

    kind = "loopback"

    def __init__(self, capture: Optional[CaptureLog] = None, clock: Callable[[], float] = time.time) -> None:
        super().__init__(capture, clock)
        self._handlers: Dict[Endpoint, Handler] = {}
        self._queue: Deque[Tuple[Endpoint, bytes]] = collections.deque()
        self._lock = threading.RLock()
        self._draining = False

    def bind(self, endpoint: Endpoint, handler: Handler) -> Listener:
        with self._lock:
            if endpoint in self._handlers:
                raise AddressInUse(str(endpoint))
            self._handlers[endpoint] = handler
        return Listener(self, endpoint)

    def unbind(self, endpoint: Endpoint) -> None:
        with self._lock:
            self._handlers.pop(endpoint, None)

    def send(self, dest: Endpoint, payload: bytes, source: Optional[Endpoint] = None) -> None:
        wire = frame(payload)
        with self._lock:
            if dest not in self._handlers:
                raise Unreachable(str(dest))
            self._record(source, dest, wire)
            self._inc()
            self._queue.append((dest, payload))
            if self._draining:
                return
            self._draining = True
        try:
            self._drain()
        finally:
            with self._lock:
                self._draining = False

    def _drain(self) -> None:
        while True:
            with self._lock:
                if not self._queue:
                    return
                dest, payload = self._queue.popleft()
                handler = self._handlers.get(dest)
            if handler is None:
                self._dec()
                continue
            self._dispatch(handler, dest, payload)


class _FrameServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class _TcpBinding:
    def __init__(self, transport: "TcpTransport", endpoint: Endpoint, handler: Handler) -> None:
        self.endpoint = endpoint
        self.inbox: "queue.Queue[Optional[bytes]]" = queue.Queue()
        binding = self

        class _Handle(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                try:
                    while True:
                        header = self.request.recv(_LENGTH.size, socket.MSG_WAITALL)
                        if not header:
                            return
                        if len(header) != _LENGTH.size:
                            return
                        (size,) = _LENGTH.unpack(header)
                        if size > MAX_FRAME:
                            return
                        binding.inbox.put(_recv_exact(self.request, size))
                        self.request.sendall(b"\x01")
                except OSError:
                    return

        try:
            self.server = _FrameServer((endpoint.host, endpoint.port), _Handle)
        except OSError as exc:
            raise AddressInUse(f"{endpoint}: {exc}") from None
        self.server_thread = threading.Thread(target=self.server.serve_forever, args=(0.05,),
                                              name=f"tcp-accept-{endpoint}", daemon=True)
        self.worker = threading.Thread(target=self._work, args=(transport, handler), name=f"tcp-worker-{endpoint}",
                                       daemon=True)
        self.server_thread.start()
        self.worker.start()

    def _work(self, transport: "TcpTransport", handler: Handler) -> None:
        # one worker per endpoint: handlers for an endpoint never overlap
        while True:
            payload = self.inbox.get()
            if payload is None:
                return
            transport._dispatch(handler, self.endpoint, payload)

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.inbox.put(None)


class TcpTransport(Transport):
    """Real sockets; one short-lived connection per frame, acknowledged on receipt."""

    kind = "tcp"

    def __init__(self, capture: Optional[CaptureLog] = None, clock: Callable[[], float] = time.time,
                 connect_timeout: float = 5.0) -> None:
        super().__init__(capture, clock)
        self.connect_timeout = connect_timeout
        self._bindings: Dict[Endpoint, _TcpBinding] = {}
        self._lock = threading.Lock()

    def bind(self, endpoint: Endpoint, handler: Handler) -> Listener:
        with self._lock:
            if endpoint in self._bindings:
                raise AddressInUse(str(endpoint))
            self._bindings[endpoint] = _TcpBinding(self, endpoint, handler)
        return Listener(self, endpoint)

    def unbind(self, endpoint: Endpoint) -> None:
        with self._lock:
            binding = self._bindings.pop(endpoint, None)
        if binding is not None:
            binding.close()

    def send(self, dest: Endpoint, payload: bytes, source: Optional[Endpoint] = None) -> None:
        wire = frame(payload)
        self._inc()
        try:
            sock = socket.create_connection((dest.host, dest.port), timeout=self.connect_timeout)
        except OSError as exc:
            self._dec()
            raise Unreachable(f"{dest}: {exc}") from None
        # recorded before the bytes leave so capture order follows causality
        self._record(source, dest, wire)
        try:
            with sock:
                sock.sendall(wire)
                ack = sock.recv(1)
        except OSError as exc:
            self._dec()
            raise Unreachable(f"{dest}: {exc}") from None
        if ack != b"\x01":
            self._dec()
            raise Unreachable(f"{dest}: frame not acknowledged")

    def close(self) -> None:
        with self._lock:
            bindings = list(self._bindings.values())
            self._bindings.clear()
        for binding in bindings:
            binding.close()


def make_transport(kind: str, capture: Optional[CaptureLog] = None,
                   clock: Callable[[], float] = time.time) -> Transport:
    if kind == "loopback":
        return LoopbackTransport(capture, clock)
    if kind == "tcp":
        return TcpTransport(capture, clock)
    raise ValueError(f"unknown transport {kind!r}")
