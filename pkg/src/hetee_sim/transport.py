"""TCP transport for the controller service.

Every message is a frame: a 4-byte big-endian length followed by that many
bytes of envelope. A zero-length frame has two meanings:

* client -> server: doorbell. The controller runs and the server answers
  with every frame posted to the connection's queue.
* server -> client: end of a reply batch.

Frames whose task id is 0 are control traffic (handshake, configuration,
release requests) and are always answered with a batch. Anything else is
written into the connection's queue window and gets no reply.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading

from .clock import VirtualClock
from .controller import HOST_TASK_ID, SecurityController
from .errors import Timeout
from .protocol import HEADER_LEN, MAX_BODY, TAG_LEN

logger = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
MAX_FRAME = HEADER_LEN + MAX_BODY + TAG_LEN


def send_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(_LEN.pack(len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None
        buf += part
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes | None:
    """Next frame, or None on a clean end of stream."""
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise ConnectionError(f"frame of {n} bytes exceeds the protocol limit")
    if n == 0:
        return b""
    data = _recv_exact(sock, n)
    if data is None:
        raise ConnectionError("stream ended inside a frame")
    return data


def _frame_task_id(frame: bytes) -> int | None:
    if len(frame) < 16:
        return None
    return int.from_bytes(frame[8:16], "little")


class _Handler(socketserver.BaseRequestHandler):
    server: "ControllerServer"

    def _batch(self, frames: list[bytes]) -> None:
        for f in frames:
            send_frame(self.request, f)
        send_frame(self.request, b"")

    def handle(self) -> None:
        ctrl = self.server.controller
        fabric = ctrl.fabric
        host = ctrl.platform.host
        with self.server.lock:
            session = ctrl.open_channel(host)
        try:
            while True:
                frame = recv_frame(self.request)
                if frame is None:
                    break
                with self.server.lock:
                    enclave = ctrl.enclaves.get(session.task_id) if session.task_id else None
                    if frame == b"":
                        out = []
                        ctrl.process()
                        if enclave is not None and enclave.queue_id in fabric.queues():
                            out = fabric.window_read(host, enclave.queue_id)
                        reply = out
                    elif _frame_task_id(frame) in (HOST_TASK_ID, None):
                        fabric.dma_transfer(host, fabric.controller_id, len(frame))
                        reply = ctrl.handle_control_frame(session, frame)
                    else:
                        reply = None
                        if enclave is not None and enclave.queue_id in fabric.queues():
                            fabric.dma_transfer(host, fabric.controller_id, len(frame))
                            fabric.window_write(host, enclave.queue_id, frame)
                        else:
                            ctrl.metrics["dropped_frames"] += 1
                if reply is not None:
                    self._batch(reply)
        except (ConnectionError, OSError) as exc:
            logger.info("connection %d: %s", session.sid, exc)
        finally:
            with self.server.lock:
                ctrl.close_channel(session)


class ControllerServer(socketserver.ThreadingTCPServer):
    """Socket-mode controller. All controller calls run under one lock."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, controller: SecurityController, address: tuple[str, int] = ("127.0.0.1", 0)):
        super().__init__(address, _Handler)
        self.controller = controller
        self.lock = threading.Lock()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "ControllerServer":
        self._thread = threading.Thread(target=self.serve_forever, name="hetee-controller", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "ControllerServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class SocketChannel:
    """Client end of a TCP connection to a :class:`ControllerServer`."""

    def __init__(self, address: tuple[str, int], *, timeout: float = 10.0):
        self.clock = VirtualClock()
        try:
            self.sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise Timeout(f"cannot reach controller at {address}: {exc}") from None
        self.closed = False

    def _io(self, fn):
        if self.closed:
            raise Timeout("channel closed")
        try:
            return fn()
        except (socket.timeout, ConnectionError, OSError) as exc:
            self.close()
            raise Timeout(str(exc) or type(exc).__name__) from None

    def _read_batch(self) -> list[bytes]:
        out = []
        while True:
            frame = recv_frame(self.sock)
            if frame is None:
                raise ConnectionError("controller closed the connection")
            if frame == b"":
                return out
            out.append(frame)

    def control(self, frame: bytes) -> list[bytes]:
        def go():
            send_frame(self.sock, frame)
            return self._read_batch()

        return self._io(go)

    def push(self, queue_id: int, frame: bytes) -> None:
        self._io(lambda: send_frame(self.sock, frame))

    def doorbell(self, queue_id: int) -> list[bytes]:
        def go():
            send_frame(self.sock, b"")
            return self._read_batch()

        return self._io(go)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.close()
            except OSError:
                pass
