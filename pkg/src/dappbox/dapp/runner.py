"""Run the compiled sensing dApp against an agent, sandboxed or native.

Both arms execute the same C source. The sandboxed arm runs the wasm32 build
inside a :class:`~dappbox.host.Runtime` instance; the native arm loads the
shared-library build with ctypes and routes its socket calls through the
same :class:`~dappbox.host.sockets.SocketHost` code, so transport cost is
common to both and the difference is the execution environment.
"""

from __future__ import annotations

import ctypes
import enum
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import guests
from ..agent import E3Agent, ScenarioConfig
from ..host.sockets import SocketHost
from .sensing import SensingConfig

EXIT_OK = 0
EXIT_PROTOCOL = 1
EXIT_REJECTED = 2
EXIT_CONNECT = 3
EXIT_CONFIG = 4

STAGE_FIELDS = ("seq", "decode_us", "process_us", "encode_us", "transmit_us", "cumulative_us", "loop_us")
STAGES = STAGE_FIELDS[1:5]


class BenchArm(enum.Enum):
    NATIVE = "native"
    SANDBOXED = "sandbox"

    @classmethod
    def parse(cls, text: str) -> "BenchArm":
        text = text.strip().lower()
        if text in ("sandbox", "sandboxed", "wasm"):
            return cls.SANDBOXED
        if text in ("native", "bare", "bare-metal"):
            return cls.NATIVE
        raise ValueError(f"unknown arm {text!r}")


@dataclass
class DappRun:
    exit_code: Optional[int]
    stages: np.ndarray  # (loops, 7) uint32, columns as STAGE_FIELDS
    decode_errors: int = 0
    controls_sent: int = 0
    trap: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK

    def column(self, name: str) -> np.ndarray:
        return self.stages[:, STAGE_FIELDS.index(name)]


def _stage_array(raw: bytes, count: int) -> np.ndarray:
    return np.frombuffer(raw, dtype="<u4", count=count * len(STAGE_FIELDS)).reshape(count, len(STAGE_FIELDS)).copy()


def _endpoints(cfg: SensingConfig) -> tuple:
    if cfg.listen_port:
        return (("dapp", cfg.listen_port),)
    return (cfg.agent_endpoint,)


# -- sandboxed arm ------------------------------------------------------------------------


def sandbox_manifest(cfg: SensingConfig, name: str = "spectrum-dapp", budget=None):
    from ..host.manifest import ModuleManifest
    from ..host.meter import UNLIMITED

    return ModuleManifest(name, guests.dapp_wasm(), _endpoints(cfg), UNLIMITED if budget is None else budget)


def start_sandboxed(runtime, cfg: SensingConfig, budget=None, name: str = "spectrum-dapp", module=None):
    """Spawn the dApp in ``runtime`` and start it; returns the instance handle.

    When the instance exits normally its ``result`` is a :class:`DappRun`.
    """
    if module is None:
        module = runtime.load_module(sandbox_manifest(cfg, name, budget))
    inst = runtime.spawn_instance(module, budget)
    text = cfg.to_keyvalue().encode()

    def init(ctx):
        cap = ctx.call("dapp_config_cap")
        if len(text) > cap:
            raise ValueError(f"config of {len(text)} bytes exceeds {cap}")
        ctx.write(ctx.call("dapp_config_buf") & 0xFFFFFFFF, text)
        return (len(text),)

    def finish(ctx):
        count = ctx.call("dapp_stage_count")
        raw = ctx.read(ctx.call("dapp_stage_log") & 0xFFFFFFFF, count * 4 * len(STAGE_FIELDS))
        return DappRun(None, _stage_array(raw, count), ctx.call("dapp_decode_errors"), ctx.call("dapp_controls_sent"))

    return inst.start("dapp_run", (), init=init, finish=finish)


def collect_sandboxed(inst, timeout: Optional[float] = None) -> DappRun:
    if not inst.join(timeout):
        inst.kill()
        inst.join(5)
    run = inst.result if isinstance(inst.result, DappRun) else DappRun(None, np.zeros((0, 7), np.uint32))
    run.exit_code = inst.exit_code
    run.trap = inst.trap
    return run


# -- native arm -------------------------------------------------------------------------------


class NativeMemory:
    """Raw process memory; the native build has no linear-memory boundary to check."""

    def check(self, ptr: int, n: int) -> None:
        pass

    def read(self, ptr: int, n: int) -> bytes:
        return ctypes.string_at(ptr, n)

    def write(self, ptr: int, data: bytes) -> None:
        ctypes.memmove(ptr, data, len(data))


_I32 = ctypes.c_int32
_PTR = ctypes.c_void_p


class _HostTable(ctypes.Structure):
    _fields_ = [
        ("sock_connect", ctypes.CFUNCTYPE(_I32, _PTR, _I32, _I32)),
        ("sock_bind", ctypes.CFUNCTYPE(_I32, _I32)),
        ("sock_accept", ctypes.CFUNCTYPE(_I32, _I32)),
        ("sock_read", ctypes.CFUNCTYPE(_I32, _I32, _PTR, _I32)),
        ("sock_write", ctypes.CFUNCTYPE(_I32, _I32, _PTR, _I32)),
        ("sock_close", ctypes.CFUNCTYPE(_I32, _I32)),
    ]


class NativeDapp:
    """The shared-library build. Its state is process-global, so runs are serialized."""

    _lock = threading.Lock()

    def __init__(self, path=None) -> None:
        self.lib = ctypes.CDLL(str(path or guests.dapp_native()))
        self.lib.dapp_run.argtypes = [_I32]
        self.lib.dapp_run.restype = _I32
        self.lib.dapp_config_buf.restype = _PTR
        self.lib.dapp_config_cap.restype = ctypes.c_uint32
        self.lib.dapp_stage_log.restype = _PTR
        for name in ("dapp_stage_count", "dapp_decode_errors", "dapp_controls_sent"):
            getattr(self.lib, name).restype = ctypes.c_uint32
        self.lib.dapp_set_host.argtypes = [ctypes.POINTER(_HostTable)]

    def run(self, network, cfg: SensingConfig, stop: Optional[threading.Event] = None) -> DappRun:
        host = SocketHost(_endpoints(cfg), network, stop=stop)
        mem = NativeMemory()
        table = _HostTable(
            _HostTable._fields_[0][1](lambda p, n, port: host.sock_connect(mem, p or 0, n, port)),
            _HostTable._fields_[1][1](host.sock_bind),
            _HostTable._fields_[2][1](host.sock_accept),
            _HostTable._fields_[3][1](lambda fd, p, n: host.sock_read(mem, fd, p or 0, n)),
            _HostTable._fields_[4][1](lambda fd, p, n: host.sock_write(mem, fd, p or 0, n)),
            _HostTable._fields_[5][1](host.sock_close),
        )
        text = cfg.to_keyvalue().encode()
        with self._lock:
            if len(text) > self.lib.dapp_config_cap():
                raise ValueError("config too long")
            self.lib.dapp_set_host(ctypes.byref(table))
            ctypes.memmove(self.lib.dapp_config_buf(), text, len(text))
            try:
                code = self.lib.dapp_run(len(text))
            finally:
                host.close_all()
            count = self.lib.dapp_stage_count()
            raw = ctypes.string_at(self.lib.dapp_stage_log(), count * 4 * len(STAGE_FIELDS))
            return DappRun(
                code, _stage_array(raw, count), self.lib.dapp_decode_errors(), self.lib.dapp_controls_sent()
            )


_native: Optional[NativeDapp] = None


def native_dapp() -> NativeDapp:
    global _native
    if _native is None:
        _native = NativeDapp()
    return _native


# -- closed loop ------------------------------------------------------------------------------------


@dataclass
class LoopResult:
    arm: BenchArm
    dapp: DappRun
    agent: E3Agent
    wall_s: float = 0.0
    instance: object = field(default=None, repr=False)


def run_closed_loop(
    arm: BenchArm,
    scenario: ScenarioConfig,
    cfg: Optional[SensingConfig] = None,
    runtime=None,
    network=None,
    timeout: float = 120.0,
) -> LoopResult:
    """One agent, one dApp, one full indication stream; returns when the stream has ended."""
    from ..net import VirtualNetwork

    if cfg is None:
        cfg = SensingConfig(
            fft_size=scenario.fft_size, n_prb=scenario.n_prb, agent_endpoint=("agent", 9990),
            period_us=scenario.indication_period_us,
        )
    if runtime is not None:
        network = runtime.network
    elif network is None:
        network = VirtualNetwork()
    agent = E3Agent(scenario)
    if not cfg.listen_port:
        agent.listen(network, *cfg.agent_endpoint)

    t0 = time.perf_counter()
    inst = None
    if arm is BenchArm.SANDBOXED:
        if runtime is None:
            from ..host.runtime import Runtime

            runtime = Runtime(network)
        inst = start_sandboxed(runtime, cfg)
        if cfg.listen_port:
            agent.dial(network, "dapp", cfg.listen_port)
        agent.start()
        run = collect_sandboxed(inst, timeout)
    else:
        stop = threading.Event()
        box: dict = {}
        th = threading.Thread(target=lambda: box.update(run=native_dapp().run(network, cfg, stop)), daemon=True)
        th.start()
        if cfg.listen_port:
            agent.dial(network, "dapp", cfg.listen_port)
        agent.start()
        th.join(timeout)
        if th.is_alive():
            stop.set()
            th.join(5)
        run = box.get("run", DappRun(None, np.zeros((0, 7), np.uint32), trap="timeout"))
    agent.stop()
    return LoopResult(arm, run, agent, time.perf_counter() - t0, inst)
