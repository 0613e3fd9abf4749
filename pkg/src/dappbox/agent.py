"""Simulated RAN-side E3 agent.

The agent accepts dApp registrations and report subscriptions, streams
synthetic I/Q indications on a timer, applies PRB-blocklist controls to a
toy scheduler and pairs each control with the indication it answers to
measure round-trip time. One selector-driven event loop serves all
connections; every timestamp comes from a single monotonic clock.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import selectors
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import codec
from .codec import (
    Control,
    E3Message,
    ErrorCode,
    ErrorIndication,
    Indication,
    IqFrame,
    PrbBlocklist,
    ServiceKind,
    SetupRequest,
    SetupResponse,
    SubscriptionRequest,
    SubscriptionResponse,
)
from .dapp.sensing import is_power_of_two

log = logging.getLogger(__name__)

MIN_PERIOD_US = 100
NEVER_US = 2**63 - 1


class MismatchedPrbCount(ValueError):
    pass


@dataclass(frozen=True)
class Incumbent:
    prb: int
    amplitude: float
    start_us: int = 0
    stop_us: int = NEVER_US

    def active(self, t_us: int) -> bool:
        return self.start_us <= t_us < self.stop_us


@dataclass(frozen=True)
class ScenarioConfig:
    n_prb: int = 64
    fft_size: int = 1024
    noise_sigma: float = 0.0
    incumbents: tuple[Incumbent, ...] = ()
    indication_period_us: int = 1000
    duration_us: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "incumbents",
            tuple(i if isinstance(i, Incumbent) else Incumbent(**i) for i in self.incumbents),
        )
        if not is_power_of_two(self.fft_size) or self.fft_size % self.n_prb:
            raise ValueError("fft_size must be a power of two and a multiple of n_prb")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for inc in self.incumbents:
            if not 0 <= inc.prb < self.n_prb:
                raise ValueError(f"incumbent PRB {inc.prb} outside [0, {self.n_prb})")
            if inc.amplitude < 0:
                raise ValueError("incumbent amplitude must be >= 0")
        if self.indication_period_us < MIN_PERIOD_US:
            raise ValueError(f"indication_period_us must be >= {MIN_PERIOD_US}")

    @property
    def n_frames(self) -> int:
        return self.duration_us // self.indication_period_us

    @staticmethod
    def sigma_for_snr(amplitude: float, snr_db: float) -> float:
        """Per-component noise std giving ``10 log10(A^2 / (2 sigma^2)) = snr_db``."""
        return amplitude / math.sqrt(2.0 * 10.0 ** (snr_db / 10.0))

    def snr_db(self, incumbent: Incumbent) -> float:
        if self.noise_sigma == 0:
            return math.inf
        return 10.0 * math.log10(incumbent.amplitude**2 / (2.0 * self.noise_sigma**2))

    def tone_bin(self, prb: int) -> int:
        width = self.fft_size // self.n_prb
        return prb * width + width // 2

    def active_prbs(self, t_us: int) -> frozenset[int]:
        return frozenset(i.prb for i in self.incumbents if i.active(t_us) and i.amplitude > 0)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return ScenarioConfig(**{**self._fields(), "seed": seed})

    def _fields(self) -> dict:
        return {
            "n_prb": self.n_prb,
            "fft_size": self.fft_size,
            "noise_sigma": self.noise_sigma,
            "incumbents": self.incumbents,
            "indication_period_us": self.indication_period_us,
            "duration_us": self.duration_us,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        d = self._fields()
        d["incumbents"] = [asdict(i) for i in self.incumbents]
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        d = json.loads(text)
        d["incumbents"] = tuple(Incumbent(**i) for i in d.get("incumbents", []))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_json(Path(path).read_text())


def frame_rng(cfg: ScenarioConfig, t_us: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, t_us])


def gen_iq_frame(cfg: ScenarioConfig, t_us: int, rng: np.random.Generator | None = None) -> IqFrame:
    """Synthesize ``fft_size`` samples of noise plus one tone per active incumbent.

    Without an explicit ``rng`` the noise is seeded from ``(cfg.seed, t_us)``,
    so a frame depends only on the scenario and the scenario time.
    """
    if rng is None:
        rng = frame_rng(cfg, t_us)
    n = cfg.fft_size
    x = np.zeros(n, dtype=np.complex128)
    if cfg.noise_sigma > 0:
        noise = rng.normal(0.0, cfg.noise_sigma, size=(2, n))
        x += noise[0] + 1j * noise[1]
    t = np.arange(n)
    for inc in cfg.incumbents:
        if inc.active(t_us) and inc.amplitude > 0:
            x += inc.amplitude * np.exp(2j * np.pi * cfg.tone_bin(inc.prb) * t / n)
    return IqFrame(x.astype(np.complex64))


@dataclass
class Subscription:
    sub_id: int
    dapp_id: int
    service: ServiceKind
    period_us: int
    next_seq: int = 0


@dataclass
class SchedulerState:
    current_blocklist: PrbBlocklist
    last_control_seq: int = 0
    applied_count: int = 0

    def blocked(self) -> frozenset[int]:
        return self.current_blocklist.indices()


@dataclass(frozen=True)
class LoopRecord:
    seq: int
    t_indication_sent_us: int
    t_control_received_us: int

    @property
    def rtt_us(self) -> int:
        return self.t_control_received_us - self.t_indication_sent_us


@dataclass
class _Stream:
    sub: Subscription
    conn: "_Conn"
    n_frames: int
    deadline_ns: int
    drain_until_ns: Optional[int] = None
    closed: bool = False
    send_times_us: list[int] = field(default_factory=list)


@dataclass
class _Conn:
    sock: socket.socket
    frames: codec.FrameBuffer = field(default_factory=codec.FrameBuffer)
    dapp_id: Optional[int] = None
    closed: bool = False


class E3Agent:
    """Single-loop agent. Call :meth:`listen` then :meth:`start` (thread) or :meth:`serve`."""

    def __init__(
        self,
        scenario: ScenarioConfig,
        clock_ns: Callable[[], int] = time.monotonic_ns,
        drain_grace_us: int = 200_000,
    ) -> None:
        self.scenario = scenario
        self.clock_ns = clock_ns
        self.drain_grace_us = drain_grace_us
        self.scheduler = SchedulerState(PrbBlocklist.empty(scenario.n_prb))
        self.dapps: dict[int, Optional[_Conn]] = {}
        self.subscriptions: dict[int, Subscription] = {}
        self.controls: list[Control] = []
        self.errors: list[ErrorIndication] = []
        self._records: dict[tuple[int, int], LoopRecord] = {}
        self._sent: dict[tuple[int, int], int] = {}
        self._streams: list[_Stream] = []
        self._conns: list[_Conn] = []
        self._listeners: list = []
        self._next_sub_id = 1
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        # select() keeps microsecond timeouts; epoll rounds up to whole milliseconds
        self._sel = selectors.SelectSelector()
        self.finished = threading.Event()

    # -- protocol -------------------------------------------------------------

    def now_us(self) -> int:
        return self.clock_ns() // 1000

    def handle_message(self, msg: E3Message, conn: Optional[_Conn] = None) -> Optional[E3Message]:
        if isinstance(msg, SetupRequest):
            if msg.dapp_id in self.dapps:
                return SetupResponse(msg.dapp_id, codec.STATUS_REJECTED)
            self.dapps[msg.dapp_id] = conn
            if conn is not None:
                conn.dapp_id = msg.dapp_id
            return SetupResponse(msg.dapp_id, codec.STATUS_OK)

        if isinstance(msg, SubscriptionRequest):
            if msg.dapp_id not in self.dapps:
                return ErrorIndication(ErrorCode.UNKNOWN_REQUEST)
            if msg.service != ServiceKind.REPORT:
                return ErrorIndication(ErrorCode.UNSUPPORTED)
            if msg.period_us < MIN_PERIOD_US:
                return SubscriptionResponse(0, codec.STATUS_REJECTED)
            sub = Subscription(self._next_sub_id, msg.dapp_id, msg.service, msg.period_us)
            self._next_sub_id += 1
            self.subscriptions[sub.sub_id] = sub
            if conn is not None:
                self._arm_stream(sub, conn)
            return SubscriptionResponse(sub.sub_id, codec.STATUS_OK)

        if isinstance(msg, Control):
            if msg.dapp_id not in self.dapps:
                return ErrorIndication(ErrorCode.UNKNOWN_REQUEST)
            try:
                self.apply_control(msg)
            except MismatchedPrbCount:
                return ErrorIndication(ErrorCode.MISMATCHED_PRB_COUNT)
            return None

        return ErrorIndication(ErrorCode.UNKNOWN_REQUEST)

    def apply_control(self, msg: Control) -> SchedulerState:
        t_recv = self.now_us()
        if msg.action.n_prb != self.scenario.n_prb:
            raise MismatchedPrbCount(
                f"control carries {msg.action.n_prb} PRBs, scenario has {self.scenario.n_prb}"
            )
        with self._lock:
            self.scheduler.current_blocklist = msg.action
            self.scheduler.last_control_seq = msg.seq
            self.scheduler.applied_count += 1
            self.controls.append(msg)
            key = (msg.dapp_id, msg.seq)
            if key in self._sent and key not in self._records:
                self._records[key] = LoopRecord(msg.seq, self._sent[key], t_recv)
        return self.scheduler

    def loop_records(self) -> list[LoopRecord]:
        with self._lock:
            return sorted(self._records.values(), key=lambda r: r.seq)

    def send_times(self) -> list[list[int]]:
        return [list(s.send_times_us) for s in self._streams]

    def write_loop_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seq", "t_sent_us", "t_recv_us", "rtt_us"])
            for r in self.loop_records():
                w.writerow([r.seq, r.t_indication_sent_us, r.t_control_received_us, r.rtt_us])

    # -- event loop -------------------------------------------------------------

    def listen(self, network, host: str, port: int):
        listener = network.listen(host, port)
        self._listeners.append(listener)
        self._sel.register(listener, selectors.EVENT_READ, ("listener", listener))
        return listener

    def dial(self, network, host: str, port: int, timeout: float = 5.0) -> None:
        """Connect out to a dApp that serves on ``(host, port)``. Call before :meth:`start`."""
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = network.connect(host, port)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.005)
        conn = _Conn(sock)
        self._conns.append(conn)
        self._sel.register(sock, selectors.EVENT_READ, ("conn", conn))

    def start(self, exit_when_done: bool = True) -> threading.Thread:
        self._thread = threading.Thread(
            target=self.serve, kwargs={"exit_when_done": exit_when_done},
            name="e3-agent", daemon=True,
        )
        self._thread.start()
        return self._thread

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)

    def serve(self, exit_when_done: bool = True) -> None:
        """Run until :meth:`stop`, or (``exit_when_done``) until every stream has ended."""
        try:
            while not self._stop.is_set():
                if exit_when_done and self._streams and all(s.closed for s in self._streams):
                    break
                for key, _ in self._sel.select(self._select_timeout()):
                    kind, obj = key.data
                    if kind == "listener":
                        self._accept(obj)
                    else:
                        self._on_readable(obj)
                self._service_streams()
        finally:
            self._shutdown()
            self.finished.set()

    def _select_timeout(self) -> float:
        now = self.clock_ns()
        timeout = 0.05
        for s in self._streams:
            if s.closed:
                continue
            due = s.drain_until_ns if s.drain_until_ns is not None else s.deadline_ns
            timeout = min(timeout, max(0.0, (due - now) / 1e9))
        return timeout

    def _accept(self, listener) -> None:
        sock = listener.accept(timeout=0)
        if sock is None:
            return
        conn = _Conn(sock)
        self._conns.append(conn)
        self._sel.register(sock, selectors.EVENT_READ, ("conn", conn))

    def _on_readable(self, conn: _Conn) -> None:
        try:
            data = conn.sock.recv(65536)
        except OSError:
            data = b""
        if not data:
            self._close_conn(conn)
            return
        try:
            messages = conn.frames.feed(data)
        except codec.CodecError as exc:
            log.warning("closing connection after undecodable frame: %s", exc)
            self._send(conn, ErrorIndication(ErrorCode.UNKNOWN_REQUEST))
            self._close_conn(conn)
            return
        for msg in messages:
            reply = self.handle_message(msg, conn)
            if reply is not None:
                self._send(conn, reply)

    def _send(self, conn: _Conn, msg: E3Message) -> bool:
        if conn.closed:
            return False
        try:
            conn.sock.sendall(codec.encode(msg))
            return True
        except OSError:
            self._close_conn(conn)
            return False

    def _arm_stream(self, sub: Subscription, conn: _Conn) -> None:
        n_frames = self.scenario.duration_us // sub.period_us
        stream = _Stream(sub, conn, n_frames, deadline_ns=self.clock_ns())
        if n_frames == 0:
            stream.drain_until_ns = self.clock_ns()
        self._streams.append(stream)

    def _service_streams(self) -> None:
        now = self.clock_ns()
        for s in self._streams:
            if s.closed:
                continue
            if s.conn.closed:
                s.closed = True
                continue
            if s.drain_until_ns is None and now >= s.deadline_ns:
                self._send_indication(s)
                if s.sub.next_seq == 1:
                    # cadence starts at the first actual send, not at subscription time
                    s.deadline_ns = self.clock_ns()
                # skip missed periods rather than bursting to catch up
                s.deadline_ns += s.sub.period_us * 1000
                if s.deadline_ns < now:
                    s.deadline_ns = now + s.sub.period_us * 1000
                if s.sub.next_seq >= s.n_frames:
                    s.drain_until_ns = now + self.drain_grace_us * 1000
            elif s.drain_until_ns is not None:
                if now >= s.drain_until_ns or self._all_answered(s):
                    s.closed = True
                    self._close_conn(s.conn)

    def _all_answered(self, s: _Stream) -> bool:
        with self._lock:
            return all((s.sub.dapp_id, q) in self._records for q in range(s.sub.next_seq))

    def _send_indication(self, s: _Stream) -> None:
        seq = s.sub.next_seq
        t_scn = seq * s.sub.period_us
        frame = gen_iq_frame(self.scenario, t_scn)
        data = codec.encode(Indication(s.sub.sub_id, seq, t_scn, frame))
        t_sent = self.now_us()
        with self._lock:
            self._sent[(s.sub.dapp_id, seq)] = t_sent
        s.send_times_us.append(t_sent)
        s.sub.next_seq += 1
        if not s.conn.closed:
            try:
                s.conn.sock.sendall(data)
            except OSError:
                self._close_conn(s.conn)
                s.closed = True

    def _close_conn(self, conn: _Conn) -> None:
        if conn.closed:
            return
        conn.closed = True
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conn.sock.close()
        for s in self._streams:
            if s.conn is conn:
                s.closed = True

    def _shutdown(self) -> None:
        for conn in self._conns:
            self._close_conn(conn)
        for listener in self._listeners:
            try:
                self._sel.unregister(listener)
            except (KeyError, ValueError):
                pass
            listener.close()
        self._listeners.clear()
