import errno
import threading

from hypothesis import given
from hypothesis import strategies as st

from dappbox.host.sockets import FIRST_FD, BytesMemory, SocketHost
from dappbox.net import TcpNetwork, VirtualNetwork

HOSTS = ["agent", "peer", "ticker", "127.0.0.1"]


def put(mem: BytesMemory, ptr: int, data: bytes) -> tuple[int, int]:
    mem.write(ptr, data)
    return ptr, len(data)


def test_descriptors_start_at_three_and_are_not_reused():
    net = VirtualNetwork()
    lst = net.listen("agent", 1)
    host = SocketHost([("agent", 1)], net)
    mem = BytesMemory(64)
    p, n = put(mem, 0, b"agent")
    a = host.sock_connect(mem, p, n, 1)
    assert a == FIRST_FD == 3
    assert host.sock_close(a) == 0
    assert host.sock_connect(mem, p, n, 1) == 4
    host.close_all()
    lst.close()


endpoints = st.tuples(st.sampled_from(HOSTS), st.integers(1, 8))


@given(allowed=st.sets(endpoints, max_size=6), listening=st.sets(endpoints, max_size=6), target=endpoints)
def test_connect_is_capability_sound(allowed, listening, target):
    net = VirtualNetwork()
    listeners = [net.listen(h, p) for h, p in listening]
    host = SocketHost(allowed, net)
    mem = BytesMemory(64)
    p, n = put(mem, 0, target[0].encode())
    r = host.sock_connect(mem, p, n, target[1])
    if target not in allowed:
        assert r == -errno.EACCES
    elif target not in listening:
        assert r == -errno.ECONNREFUSED
    else:
        assert r >= FIRST_FD
    # nothing outside the whitelist was ever opened
    assert all((h, port) in allowed for _, h, port in host.opened)
    host.close_all()
    for lst in listeners:
        lst.close()


def test_port_must_fit_u16():
    net = VirtualNetwork()
    lst = net.listen("agent", 5)
    host = SocketHost([("agent", 5)], net)
    mem = BytesMemory(64)
    p, n = put(mem, 0, b"agent")
    assert host.sock_connect(mem, p, n, 65536 + 5) == -errno.EINVAL
    assert host.sock_connect(mem, p, n, -1) == -errno.EINVAL
    assert host.sock_bind(1 << 20) == -errno.EINVAL
    lst.close()


def test_read_write_round_trip_and_faults():
    net = VirtualNetwork()
    lst = net.listen("peer", 7)
    host = SocketHost([("peer", 7)], net)
    mem = BytesMemory(256)
    p, n = put(mem, 0, b"peer")
    fd = host.sock_connect(mem, p, n, 7)
    server = lst.accept(1.0)
    put(mem, 100, b"hello")
    assert host.sock_write(mem, fd, 100, 5) == 5
    assert server.recv(16) == b"hello"
    server.sendall(b"world")
    assert host.sock_read(mem, fd, 200, 16) == 5
    assert mem.read(200, 5) == b"world"
    # out-of-range pointers never reach host memory
    assert host.sock_read(mem, fd, 250, 16) == -errno.EFAULT
    assert host.sock_read(mem, fd, -4, 2) == -errno.EFAULT
    assert host.sock_write(mem, fd, 255, 2) == -errno.EFAULT
    assert host.sock_connect(mem, 300, 4, 7) == -errno.EFAULT
    # unknown descriptors
    assert host.sock_read(mem, 99, 0, 4) == -errno.EBADF
    assert host.sock_write(mem, 99, 0, 4) == -errno.EBADF
    assert host.sock_close(99) == -errno.EBADF
    assert host.sock_accept(fd) == -errno.EBADF
    server.close()
    assert host.sock_read(mem, fd, 0, 16) == 0  # EOF
    host.close_all()
    lst.close()


def test_bind_accept():
    net = VirtualNetwork()
    host = SocketHost([("dapp", 9)], net)
    mem = BytesMemory(64)
    assert host.sock_bind(10) == -errno.EACCES
    lfd = host.sock_bind(9)
    assert lfd == FIRST_FD
    peer = {}
    t = threading.Thread(target=lambda: peer.setdefault("s", net.connect("dapp", 9)))
    t.start()
    cfd = host.sock_accept(lfd)
    t.join()
    assert cfd == lfd + 1
    peer["s"].sendall(b"x")
    assert host.sock_read(mem, cfd, 0, 1) == 1
    host.close_all()
    assert host.descriptors == []
    peer["s"].close()


def test_bind_same_endpoint_twice_fails():
    net = VirtualNetwork()
    h1 = SocketHost([("dapp", 9)], net)
    h2 = SocketHost([("dapp", 9)], net)
    assert h1.sock_bind(9) >= FIRST_FD
    assert h2.sock_bind(9) == -errno.EADDRINUSE
    h1.close_all()


def test_tcp_network_loopback():
    net = TcpNetwork()
    lst = net.listen("127.0.0.1", 0)
    port = lst.endpoint[1]
    host = SocketHost([("127.0.0.1", port)], net)
    mem = BytesMemory(64)
    p, n = put(mem, 0, b"127.0.0.1")
    fd = host.sock_connect(mem, p, n, port)
    server = lst.accept(2.0)
    put(mem, 32, b"abc")
    assert host.sock_write(mem, fd, 32, 3) == 3
    assert server.recv(3) == b"abc"
    server.close()
    host.close_all()
    lst.close()
