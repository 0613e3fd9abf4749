"""Transports shared by the host runtime and the E3 agent.

Two interchangeable networks expose the same ``listen``/``connect`` surface:

* :class:`VirtualNetwork` - in-process channels. An endpoint is any
  ``(host, port)`` pair registered by a listener; ``connect`` hands the
  listener one end of a ``socketpair``. No ports are opened on the machine.
* :class:`TcpNetwork` - real loopback TCP sockets.

Both return plain :class:`socket.socket` objects for connections, so the
agent can multiplex them with :mod:`selectors` either way.
"""

from __future__ import annotations

import errno
import select
import socket
import threading
from collections import deque
from typing import Protocol


Endpoint = tuple[str, int]


class Listener(Protocol):
    endpoint: Endpoint

    def fileno(self) -> int: ...

    def accept(self, timeout: float | None = None) -> socket.socket | None: ...

    def close(self) -> None: ...


class VirtualListener:
    def __init__(self, network: "VirtualNetwork", endpoint: Endpoint) -> None:
        self.endpoint = endpoint
        self._network = network
        self._pending: deque[socket.socket] = deque()
        self._lock = threading.Lock()
        # readable end signals pending connections to select()
        self._wake_r, self._wake_w = socket.socketpair()
        self._closed = False

    def fileno(self) -> int:
        return self._wake_r.fileno()

    def _enqueue(self, sock: socket.socket) -> None:
        with self._lock:
            if self._closed:
                raise ConnectionRefusedError(errno.ECONNREFUSED, "listener closed")
            self._pending.append(sock)
        self._wake_w.send(b"\0")

    def accept(self, timeout: float | None = None) -> socket.socket | None:
        ready, _, _ = select.select([self._wake_r], [], [], timeout)
        if not ready:
            return None
        self._wake_r.recv(1)
        with self._lock:
            return self._pending.popleft()

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            pending = list(self._pending)
            self._pending.clear()
        self._network._unregister(self.endpoint, self)
        for s in pending:
            s.close()
        self._wake_r.close()
        self._wake_w.close()


class VirtualNetwork:
    mode = "virtual"

    def __init__(self) -> None:
        self._listeners: dict[Endpoint, VirtualListener] = {}
        self._lock = threading.Lock()

    def listen(self, host: str, port: int) -> VirtualListener:
        key = (host, int(port))
        with self._lock:
            if key in self._listeners:
                raise OSError(errno.EADDRINUSE, f"{host}:{port} already bound")
            listener = VirtualListener(self, key)
            self._listeners[key] = listener
        return listener

    def connect(self, host: str, port: int, timeout: float | None = None) -> socket.socket:
        with self._lock:
            listener = self._listeners.get((host, int(port)))
        if listener is None:
            raise ConnectionRefusedError(errno.ECONNREFUSED, f"nothing listening on {host}:{port}")
        client, server = socket.socketpair()
        try:
            listener._enqueue(server)
        except ConnectionRefusedError:
            client.close()
            server.close()
            raise
        return client

    def _unregister(self, endpoint: Endpoint, listener: VirtualListener) -> None:
        with self._lock:
            if self._listeners.get(endpoint) is listener:
                del self._listeners[endpoint]


class TcpListener:
    def __init__(self, host: str, port: int) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self.endpoint = (host, self._sock.getsockname()[1])

    def fileno(self) -> int:
        return self._sock.fileno()

    def accept(self, timeout: float | None = None) -> socket.socket | None:
        ready, _, _ = select.select([self._sock], [], [], timeout)
        if not ready:
            return None
        conn, _ = self._sock.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return conn

    def close(self) -> None:
        self._sock.close()


class TcpNetwork:
    mode = "tcp"

    def listen(self, host: str, port: int) -> TcpListener:
        return TcpListener(host, port)

    def connect(self, host: str, port: int, timeout: float | None = 5.0) -> socket.socket:
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly ``n`` bytes or raise :class:`ConnectionError` on EOF."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)
