"""Sandbox runtime: load, validate, instantiate and meter dApp modules.

Modules run on wasmtime. Before compilation every module is rewritten by
:mod:`dappbox.host.instrument` so that the host is consulted at basic-block
granularity; that callback is where windowed budgets are enforced and where
a guest is parked (its stack and memory intact) until the next window.

Each instance gets its own :class:`wasmtime.Store`, linear memory, socket
table and OS thread. wasmtime releases the GIL while guest code runs, so
instances really do execute concurrently.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional

import wasmtime

from .._gc import gc_paused
from ..net import VirtualNetwork
from . import instrument
from .instrument import InvalidBytecode
from .manifest import ModuleManifest, resolve_budget
from .meter import (
    DEFAULT_CHUNK,
    DEFAULT_WINDOW_US,
    UNLIMITED,
    Budget,
    GasBudget,
    InstanceStopped,
    Meter,
    WindowClock,
    WindowUsage,
)
from .sockets import GuestFault, SocketHost

log = logging.getLogger(__name__)

I32 = wasmtime.ValType.i32()
I64 = wasmtime.ValType.i64()

#: every host function a guest may import: (module, name) -> (params, results)
HOST_FUNCTIONS: dict[tuple[str, str], tuple[list, list]] = {
    ("env", "sock_connect"): ([I32, I32, I32], [I32]),
    ("env", "sock_bind"): ([I32], [I32]),
    ("env", "sock_accept"): ([I32], [I32]),
    ("env", "sock_read"): ([I32, I32, I32], [I32]),
    ("env", "sock_write"): ([I32, I32, I32], [I32]),
    ("env", "sock_close"): ([I32], [I32]),
    ("env", "clock_us"): ([], [I64]),
    # system-interface stub: lets toolchain-generated exit paths link
    ("wasi_snapshot_preview1", "proc_exit"): ([I32], []),
}
SOCKET_FUNCTIONS = frozenset(n for (_, n) in HOST_FUNCTIONS if n.startswith("sock_"))

DEFAULT_MAX_INSTANCES = 16


class ForbiddenImport(Exception):
    def __init__(self, name: str) -> None:
        super().__init__(name)
        self.name = name


class ResourceExhausted(RuntimeError):
    pass


class CalibrationTooShort(ValueError):
    pass


class ProcExit(Exception):
    def __init__(self, code: int) -> None:
        super().__init__(code)
        self.code = code


class InstanceState(enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    SUSPENDED = "suspended"
    TRAPPED = "trapped"
    EXITED = "exited"

    @property
    def terminal(self) -> bool:
        return self in (InstanceState.TRAPPED, InstanceState.EXITED)


@dataclass
class ModuleHandle:
    manifest: ModuleManifest
    module: wasmtime.Module
    imports: list[instrument.Import]

    @property
    def resolved_imports(self) -> list[str]:
        return [i.name for i in self.imports]


class WasmMemory:
    """Bounds-checked view of an instance's exported linear memory for one host call."""

    __slots__ = ("_mem", "_store")

    def __init__(self, mem: wasmtime.Memory, store) -> None:
        self._mem = mem
        self._store = store

    def check(self, ptr: int, n: int) -> None:
        if ptr < 0 or n < 0 or ptr + n > self._mem.data_len(self._store):
            raise GuestFault(f"[{ptr}, {ptr + n}) outside linear memory")

    def read(self, ptr: int, n: int) -> bytes:
        self.check(ptr, n)
        return bytes(self._mem.read(self._store, ptr, ptr + n))

    def write(self, ptr: int, data: bytes) -> None:
        self.check(ptr, len(data))
        self._mem.write(self._store, data, ptr)


class _NoMemory:
    def check(self, ptr: int, n: int) -> None:
        raise GuestFault("module exports no memory")

    read = write = lambda self, *a: self.check(0, 0)  # noqa: E731


class GuestContext:
    """What ``init``/``finish`` hooks see: exported calls and memory access, on the guest thread."""

    def __init__(self, store: wasmtime.Store, instance: wasmtime.Instance) -> None:
        self.store = store
        self.exports = instance.exports(store)
        mem = self.exports.get("memory") if "memory" in self.exports else None
        self.memory = WasmMemory(mem, store) if isinstance(mem, wasmtime.Memory) else _NoMemory()

    def call(self, name: str, *args):
        return self.exports[name](self.store, *args)

    def read(self, ptr: int, n: int) -> bytes:
        return self.memory.read(ptr, n)

    def write(self, ptr: int, data: bytes) -> None:
        self.memory.write(ptr, data)


class InstanceHandle:
    def __init__(self, runtime: "Runtime", instance_id: int, module: ModuleHandle, budget: Budget) -> None:
        self.runtime = runtime
        self.instance_id = instance_id
        self.module = module
        self.manifest = module.manifest
        self.state = InstanceState.CREATED
        self.exit_code: Optional[int] = None
        self.trap: Optional[str] = None
        self.result: Any = None
        self._state_lock = threading.Lock()
        self.meter = Meter(
            instance_id, runtime.clock, budget, chunk=runtime.chunk, on_suspend=self._on_suspend
        )
        self.sockets = SocketHost(
            self.manifest.allowed_endpoints,
            runtime.network,
            stop=self.meter.stop,
            on_idle=self.meter.poll,
        )
        self._thread: Optional[threading.Thread] = None
        self._final_charge: Optional[Callable[[], int]] = None
        self.native_id: Optional[int] = None
        self.started = threading.Event()
        self.done = threading.Event()

    def __repr__(self) -> str:
        return f"<Instance {self.instance_id} {self.manifest.name} {self.state.value}>"

    @property
    def budget(self) -> Budget:
        return self.meter.budget

    def set_budget(self, budget: Budget) -> None:
        self.meter.set_budget(budget)

    @property
    def alive(self) -> bool:
        return not self.state.terminal

    def _set_state(self, state: InstanceState) -> None:
        with self._state_lock:
            if not self.state.terminal:
                self.state = state

    def _on_suspend(self, suspended: bool) -> None:
        self._set_state(InstanceState.SUSPENDED if suspended else InstanceState.RUNNING)

    # -- lifecycle ------------------------------------------------------------------

    def start(
        self,
        entry: str,
        args: Iterable = (),
        init: Optional[Callable[[GuestContext], Optional[tuple]]] = None,
        finish: Optional[Callable[[GuestContext], Any]] = None,
    ) -> "InstanceHandle":
        """Instantiate and call export ``entry`` on the instance's own thread.

        ``init`` may prepare guest memory and return the entry arguments;
        ``finish`` runs after a normal return and its value lands in ``result``.
        """
        if self._thread is not None:
            raise RuntimeError("instance already started")
        self._thread = threading.Thread(
            target=self._main, args=(entry, tuple(args), init, finish),
            name=f"guest-{self.instance_id}-{self.manifest.name}", daemon=True,
        )
        self.state = InstanceState.RUNNING
        self._thread.start()
        return self

    def kill(self) -> None:
        self.meter.stop.set()

    def join(self, timeout: Optional[float] = None) -> bool:
        return self.done.wait(timeout)

    def _main(self, entry, args, init, finish) -> None:
        self.native_id = threading.get_native_id()
        try:
            store = wasmtime.Store(self.runtime.engine)
            linker = wasmtime.Linker(self.runtime.engine)
            self._define_host(linker)
            instance = linker.instantiate(store, self.module.module)
            ctx = GuestContext(store, instance)
            fuel = ctx.exports[instrument.FUEL_EXPORT]
            fuel.set_value(store, wasmtime.Val.i64(self.meter.flush(0)))
            self._final_charge = lambda: self.meter.flush(fuel.value(store))
            self.started.set()
            if init is not None:
                prepared = init(ctx)
                if prepared is not None:
                    args = prepared
            ret = ctx.call(entry, *args)
            self.result = finish(ctx) if finish is not None else ret
            self._exit(ret if isinstance(ret, int) else 0)
        except ProcExit as exc:
            self._exit(exc.code)
        except InstanceStopped:
            self._trapped("stopped by host")
        except wasmtime.Trap as exc:
            self._trapped(str(exc).splitlines()[0] if str(exc) else "trap")
        except wasmtime.WasmtimeError as exc:
            self._trapped(str(exc).splitlines()[0])
        except Exception as exc:  # host-side failure; contain it to this instance
            log.exception("instance %s failed", self.instance_id)
            self._trapped(f"{type(exc).__name__}: {exc}")
        finally:
            self.started.set()
            if self._final_charge is not None:
                self._final_charge()
            self.sockets.close_all()
            self.meter.finish()
            self.done.set()
            self.runtime._release(self)

    def _exit(self, code: int) -> None:
        with self._state_lock:
            self.exit_code = code
            self.state = InstanceState.EXITED

    def _trapped(self, reason: str) -> None:
        with self._state_lock:
            self.trap = reason
            self.state = InstanceState.TRAPPED

    # -- host functions -----------------------------------------------------------------

    def _flush(self, caller) -> None:
        fuel = caller.get(instrument.FUEL_EXPORT)
        fuel.set_value(caller, wasmtime.Val.i64(self.meter.flush(fuel.value(caller))))

    def _define_host(self, linker: wasmtime.Linker) -> None:
        sockets = self.sockets
        meter = self.meter

        def mem(caller) -> WasmMemory:
            m = caller.get("memory")
            if not isinstance(m, wasmtime.Memory):
                return _NoMemory()
            return WasmMemory(m, caller)

        def blocking(fn):
            # account fuel before parking the guest in a potentially long host call
            def call(caller, *args):
                self._flush(caller)
                try:
                    return fn(caller, *args)
                finally:
                    self._flush(caller)
            return call

        impls = {
            "sock_connect": blocking(lambda c, p, n, port: sockets.sock_connect(mem(c), p, n, port)),
            "sock_bind": lambda c, port: sockets.sock_bind(port),
            "sock_accept": blocking(lambda c, fd: sockets.sock_accept(fd)),
            "sock_read": blocking(lambda c, fd, p, n: sockets.sock_read(mem(c), fd, p, n)),
            "sock_write": lambda c, fd, p, n: sockets.sock_write(mem(c), fd, p, n),
            "sock_close": lambda c, fd: sockets.sock_close(fd),
            "clock_us": lambda c: time.monotonic_ns() // 1000,
        }

        def proc_exit(c, code):
            raise ProcExit(code)

        for imp in self.module.imports:
            params, results = HOST_FUNCTIONS[(imp.module, imp.name)]
            fn = proc_exit if imp.name == "proc_exit" else impls[imp.name]
            linker.define_func(
                imp.module, imp.name, wasmtime.FuncType(params, results), fn, access_caller=True
            )
        linker.define_func(
            instrument.METER_MODULE, instrument.REFUEL_NAME,
            wasmtime.FuncType([I64, I64], [I64]), meter.refuel,
        )


class Runtime:
    """Host environment for sandboxed modules.

    ``network`` is a :class:`~dappbox.net.VirtualNetwork` (default) or a
    :class:`~dappbox.net.TcpNetwork`.
    """

    def __init__(
        self,
        network=None,
        window_us: int = DEFAULT_WINDOW_US,
        max_instances: int = DEFAULT_MAX_INSTANCES,
        chunk: int = DEFAULT_CHUNK,
    ) -> None:
        self.network = network if network is not None else VirtualNetwork()
        self.engine = wasmtime.Engine()
        self.clock = WindowClock(window_us)
        self.max_instances = max_instances
        self.chunk = chunk
        self.capacity: Optional[int] = None
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._live: dict[int, InstanceHandle] = {}
        self.instances: dict[int, InstanceHandle] = {}

    @property
    def window_us(self) -> int:
        return self.clock.window_us

    def reset_clock(self) -> None:
        """Restart window numbering at 0 (only meaningful before instances are spawned)."""
        self.clock.t0_ns = self.clock.clock_ns()

    # -- loading ------------------------------------------------------------------------

    def load_module(self, manifest: ModuleManifest) -> ModuleHandle:
        try:
            data = Path(manifest.bytecode_path).read_bytes()
        except OSError as exc:
            raise InvalidBytecode(f"cannot read {manifest.bytecode_path}: {exc}") from exc
        return self._load_bytes(manifest, data)

    def _load_bytes(self, manifest: ModuleManifest, data: bytes) -> ModuleHandle:
        if not data:
            raise InvalidBytecode("empty module")
        try:
            wasmtime.Module.validate(self.engine, data)
        except wasmtime.WasmtimeError as exc:
            raise InvalidBytecode(str(exc).splitlines()[0]) from exc
        parsed = instrument.parse_module(data)
        for imp in parsed.imports:
            sig = HOST_FUNCTIONS.get((imp.module, imp.name))
            if imp.kind != 0 or sig is None:
                raise ForbiddenImport(imp.name)
        metered = instrument.instrument(data)
        try:
            module = wasmtime.Module(self.engine, metered.wasm)
        except wasmtime.WasmtimeError as exc:
            raise InvalidBytecode(str(exc).splitlines()[0]) from exc
        for imp in module.imports:
            if imp.module == instrument.METER_MODULE:
                continue
            params, results = HOST_FUNCTIONS[(imp.module, imp.name)]
            ft = imp.type
            if [str(p) for p in ft.params] != [str(p) for p in params] or [
                str(r) for r in ft.results
            ] != [str(r) for r in results]:
                raise InvalidBytecode(f"import {imp.module}.{imp.name} has the wrong signature")
        return ModuleHandle(manifest, module, metered.imports)

    # -- instances ------------------------------------------------------------------------

    def spawn_instance(self, handle: ModuleHandle, budget=None) -> InstanceHandle:
        budget = resolve_budget(handle.manifest.budget if budget is None else budget, self.capacity)
        if isinstance(budget, GasBudget) and budget.window_us != self.clock.window_us:
            raise ValueError(
                f"budget window {budget.window_us} us differs from runtime window {self.clock.window_us} us"
            )
        with self._lock:
            if len(self._live) >= self.max_instances:
                raise ResourceExhausted(f"instance limit {self.max_instances} reached")
            inst = InstanceHandle(self, next(self._ids), handle, budget)
            self._live[inst.instance_id] = inst
            self.instances[inst.instance_id] = inst
        return inst

    def _release(self, inst: InstanceHandle) -> None:
        with self._lock:
            self._live.pop(inst.instance_id, None)

    def instruction_usage(self, instance: InstanceHandle, window_index: int) -> WindowUsage:
        instance.meter.poll()
        return instance.meter.usage(window_index)

    def run_window_scheduler(
        self,
        instances: Iterable[InstanceHandle],
        duration_us: Optional[int] = None,
        lag_us: int = 500,
    ) -> Iterator[WindowUsage]:
        """Yield one :class:`WindowUsage` per instance per closed window.

        Stops when every instance has ended or after ``duration_us``.
        Records of an instance stop at the window in which it ended.
        """
        instances = list(instances)
        if not instances:
            raise ValueError("no instances to schedule")
        emitted = {i.instance_id: 0 for i in instances}
        start_us = self.clock.elapsed_us()
        while True:
            for inst in instances:
                if not inst.done.is_set():
                    inst.meter.poll()
                for rec in inst.meter.closed_records(emitted[inst.instance_id]):
                    emitted[inst.instance_id] = rec.window_index + 1
                    yield rec
            if all(i.done.is_set() for i in instances):
                return
            if duration_us is not None and self.clock.elapsed_us() - start_us >= duration_us:
                return
            next_boundary = self.clock.start_ns(self.clock.current() + 1) + lag_us * 1000
            self.clock.sleep_until(next_boundary)

    # -- calibration -----------------------------------------------------------------------

    def calibrate_capacity(self, duration_us: int = 1_000_000, warmup_us: int = 50_000) -> int:
        """Measure unmetered busy-loop fuel per window and store it as ``capacity``."""
        if duration_us <= 0:
            raise CalibrationTooShort("calibration needs a positive duration")
        from ..guests import guest_path

        manifest = ModuleManifest("calibrate", guest_path("load"))
        inst = self.spawn_instance(self._load_bytes(manifest, manifest.bytecode_path.read_bytes()), UNLIMITED)
        with gc_paused():
            inst.start("saturate")
            inst.started.wait(10)
            time.sleep(warmup_us / 1e6)
            u0, t0 = inst.meter.total_used, time.monotonic_ns()
            time.sleep(duration_us / 1e6)
            u1, t1 = inst.meter.total_used, time.monotonic_ns()
        inst.kill()
        inst.join(5)
        per_us = (u1 - u0) / ((t1 - t0) / 1000)
        self.capacity = int(per_us * self.clock.window_us)
        return self.capacity
