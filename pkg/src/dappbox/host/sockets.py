"""Capability-scoped socket host functions.

:class:`SocketHost` implements ``sock_connect``, ``sock_bind``,
``sock_accept``, ``sock_read``, ``sock_write`` and ``sock_close`` for one
instance. Guest memory is reached only through a :class:`GuestMemory`
accessor, which copies bytes in or out after a bounds check, so host
buffers are never aliased into the guest. Results follow the usual
convention: a non-negative value on success, ``-errno`` on failure.
"""

from __future__ import annotations

import errno
import socket
import threading
from typing import Callable, Optional, Protocol

from .meter import InstanceStopped

EACCES = errno.EACCES
EBADF = errno.EBADF
ECONNREFUSED = errno.ECONNREFUSED
EFAULT = errno.EFAULT
EINVAL = errno.EINVAL
EADDRINUSE = errno.EADDRINUSE
EPIPE = errno.EPIPE

FIRST_FD = 3
IO_CHUNK_MAX = 1 << 20


class GuestFault(Exception):
    pass


class GuestMemory(Protocol):
    def read(self, ptr: int, n: int) -> bytes: ...

    def write(self, ptr: int, data: bytes) -> None: ...

    def check(self, ptr: int, n: int) -> None: ...


class _Listen:
    __slots__ = ("listener",)

    def __init__(self, listener) -> None:
        self.listener = listener


class SocketHost:
    """Per-instance descriptor table. Descriptors start at 3 and are never reused."""

    def __init__(
        self,
        allowed_endpoints,
        network,
        stop: Optional[threading.Event] = None,
        poll_s: float = 0.005,
        on_idle: Optional[Callable[[], None]] = None,
    ) -> None:
        self.allowed = {(h, int(p)) for h, p in allowed_endpoints}
        self.network = network
        self.stop = stop or threading.Event()
        self.poll_s = poll_s
        self.on_idle = on_idle
        self._table: dict[int, object] = {}
        self._next_fd = FIRST_FD
        self._fd_locks: dict[int, threading.Lock] = {}
        self.opened: list[tuple[str, str, int]] = []  # (kind, host, port) audit trail

    def _install(self, obj) -> int:
        fd = self._next_fd
        self._next_fd += 1
        self._table[fd] = obj
        self._fd_locks[fd] = threading.Lock()
        return fd

    def _idle(self) -> None:
        if self.stop.is_set():
            raise InstanceStopped()
        if self.on_idle is not None:
            self.on_idle()

    @property
    def descriptors(self) -> list[int]:
        return sorted(self._table)

    # -- host functions ----------------------------------------------------------

    def sock_connect(self, mem: GuestMemory, host_ptr: int, host_len: int, port: int) -> int:
        try:
            raw = mem.read(host_ptr, host_len)
        except GuestFault:
            return -EFAULT
        try:
            host = raw.decode("utf-8")
        except UnicodeDecodeError:
            return -EACCES
        if not 0 <= port <= 0xFFFF:
            return -EINVAL
        if (host, port) not in self.allowed:
            return -EACCES
        try:
            sock = self.network.connect(host, port)
        except (ConnectionRefusedError, socket.timeout, OSError):
            return -ECONNREFUSED
        self.opened.append(("connect", host, port))
        return self._install(sock)

    def sock_bind(self, port: int) -> int:
        if not 0 <= port <= 0xFFFF:
            return -EINVAL
        hosts = sorted(h for h, p in self.allowed if p == port)
        if not hosts:
            return -EACCES
        try:
            listener = self.network.listen(hosts[0], port)
        except OSError as exc:
            return -(exc.errno or EADDRINUSE)
        self.opened.append(("bind", hosts[0], port))
        return self._install(_Listen(listener))

    def sock_accept(self, listen_fd: int) -> int:
        entry = self._table.get(listen_fd)
        if not isinstance(entry, _Listen):
            return -EBADF
        while True:
            sock = entry.listener.accept(timeout=self.poll_s)
            if sock is not None:
                return self._install(sock)
            self._idle()

    def sock_read(self, mem: GuestMemory, fd: int, buf_ptr: int, buf_len: int) -> int:
        try:
            mem.check(buf_ptr, buf_len)
        except GuestFault:
            return -EFAULT
        sock = self._table.get(fd)
        if not isinstance(sock, socket.socket):
            return -EBADF
        want = min(buf_len, IO_CHUNK_MAX)
        if want == 0:
            return 0
        with self._fd_locks[fd]:
            sock.settimeout(self.poll_s)
            try:
                while True:
                    try:
                        data = sock.recv(want)
                        break
                    except socket.timeout:
                        self._idle()
                    except (ConnectionResetError, OSError):
                        data = b""
                        break
            finally:
                try:
                    sock.settimeout(None)
                except OSError:
                    pass
        if data:
            mem.write(buf_ptr, data)
        return len(data)

    def sock_write(self, mem: GuestMemory, fd: int, buf_ptr: int, buf_len: int) -> int:
        try:
            data = mem.read(buf_ptr, buf_len)
        except GuestFault:
            return -EFAULT
        sock = self._table.get(fd)
        if not isinstance(sock, socket.socket):
            return -EBADF
        with self._fd_locks[fd]:
            try:
                sock.sendall(data)
            except OSError:
                return -EPIPE
        return len(data)

    def sock_close(self, fd: int) -> int:
        entry = self._table.pop(fd, None)
        if entry is None:
            return -EBADF
        self._fd_locks.pop(fd, None)
        if isinstance(entry, _Listen):
            entry.listener.close()
        else:
            try:
                entry.close()
            except OSError:
                pass
        return 0

    def close_all(self) -> None:
        for fd in list(self._table):
            self.sock_close(fd)


class BytesMemory:
    """A bounds-checked guest memory backed by a bytearray (tests, native shims)."""

    def __init__(self, size: int) -> None:
        self.data = bytearray(size)

    def check(self, ptr: int, n: int) -> None:
        if ptr < 0 or n < 0 or ptr + n > len(self.data):
            raise GuestFault(f"[{ptr}, {ptr + n}) outside memory of {len(self.data)} bytes")

    def read(self, ptr: int, n: int) -> bytes:
        self.check(ptr, n)
        return bytes(self.data[ptr : ptr + n])

    def write(self, ptr: int, data: bytes) -> None:
        self.check(ptr, len(data))
        self.data[ptr : ptr + len(data)] = data
