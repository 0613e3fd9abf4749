import time

import pytest
import wasmtime

from dappbox import codec
from dappbox.guests import dapp_wasm, guest_path
from dappbox.host.manifest import ModuleManifest, PercentBudget
from dappbox.host.meter import EPSILON, UNLIMITED, GasBudget, UnknownWindow
from dappbox.host.runtime import (
    CalibrationTooShort,
    ForbiddenImport,
    InstanceState,
    InvalidBytecode,
    ResourceExhausted,
    Runtime,
)
from dappbox.host.sockets import FIRST_FD

SOCK_IMPORTS = {"sock_connect", "sock_bind", "sock_accept", "sock_read", "sock_write", "sock_close"}


def load(rt, name, endpoints=(), budget=UNLIMITED):
    return rt.load_module(ModuleManifest(name, guest_path(name), endpoints, budget))


def wait_state(inst, pred, timeout=5.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred(inst):
            return True
        time.sleep(0.005)
    return False


def test_sensing_dapp_imports(runtime):
    h = runtime.load_module(ModuleManifest("dapp", dapp_wasm()))
    names = set(h.resolved_imports)
    assert SOCK_IMPORTS <= names
    assert names - SOCK_IMPORTS <= {"clock_us"}


def test_forbidden_import(runtime):
    with pytest.raises(ForbiddenImport) as ei:
        load(runtime, "forbidden")
    assert ei.value.name == "proc_spawn"


def test_invalid_bytecode(runtime, tmp_path):
    empty = tmp_path / "empty.wasm"
    empty.write_bytes(b"")
    with pytest.raises(InvalidBytecode):
        runtime.load_module(ModuleManifest("empty", empty))
    junk = tmp_path / "junk.wasm"
    junk.write_bytes(b"\0asm\x01\0\0\0\xff\xff")
    with pytest.raises(InvalidBytecode):
        runtime.load_module(ModuleManifest("junk", junk))
    with pytest.raises(InvalidBytecode):
        runtime.load_module(ModuleManifest("missing", tmp_path / "nope.wasm"))


def test_wrong_import_signature(runtime, tmp_path):
    p = tmp_path / "sig.wasm"
    p.write_bytes(wasmtime.wat2wasm('(module (import "env" "sock_close" (func (param i64) (result i32))))'))
    with pytest.raises(InvalidBytecode):
        runtime.load_module(ModuleManifest("sig", p))


def test_instance_limit():
    rt = Runtime(max_instances=2)
    h = load(rt, "checksum")
    rt.spawn_instance(h)
    rt.spawn_instance(h)
    with pytest.raises(ResourceExhausted):
        rt.spawn_instance(h)


def test_exit_code_and_proc_exit(runtime, tmp_path):
    inst = runtime.spawn_instance(load(runtime, "checksum")).start("checksum", (10,))
    assert inst.join(5)
    assert inst.state is InstanceState.EXITED
    p = tmp_path / "exit.wasm"
    p.write_bytes(wasmtime.wat2wasm(
        '(module (import "wasi_snapshot_preview1" "proc_exit" (func $e (param i32)))'
        ' (func (export "run") (call $e (i32.const 7))))'
    ))
    inst = runtime.spawn_instance(runtime.load_module(ModuleManifest("exit", p))).start("run")
    assert inst.join(5)
    assert inst.state is InstanceState.EXITED and inst.exit_code == 7


@pytest.mark.parametrize("entry,args", [("oob_store", ()), ("unreachable", ()), ("div_zero", (0,))])
def test_trap_is_terminal(runtime, entry, args):
    inst = runtime.spawn_instance(load(runtime, "trap")).start(entry, args)
    assert inst.join(5)
    assert inst.state is InstanceState.TRAPPED and inst.trap
    inst.kill()
    assert inst.state is InstanceState.TRAPPED


def test_containment_survivor_keeps_reporting(runtime):
    survivor = runtime.spawn_instance(load(runtime, "load"), GasBudget(200_000)).start("saturate")
    bad = runtime.spawn_instance(load(runtime, "trap"))
    records = []
    for rec in runtime.run_window_scheduler([survivor, bad], duration_us=300_000):
        records.append(rec)
        if rec.instance_id == survivor.instance_id and rec.window_index == 3 and bad.state is InstanceState.CREATED:
            bad.start("oob_store")
    assert bad.state is InstanceState.TRAPPED
    trap_window = max(r.window_index for r in records if r.instance_id == bad.instance_id)
    later = [r for r in records if r.instance_id == survivor.instance_id and r.window_index > trap_window + 1]
    assert len(later) >= 10
    # next-window usage of the survivor is unaffected: still at its budget
    assert all(r.instructions_used >= 200_000 - 64 for r in later)
    assert survivor.alive


def test_memory_isolation(runtime):
    peer = runtime.network.listen("peer", 5)
    a = runtime.spawn_instance(load(runtime, "echo", [("peer", 5)]))
    b = runtime.spawn_instance(load(runtime, "echo", [("peer", 5)]))
    sentinel = 0x5EC2E7

    def poke_then_send(ctx):
        ctx.call("poke", 1024, sentinel)
        return (5, 64)

    a.start("send", init=poke_then_send)
    srv_a = peer.accept(5)
    assert a.join(5) and a.exit_code == 64
    data_a = srv_a.recv(64)
    assert int.from_bytes(data_a[:4], "little") == sentinel

    def peek(ctx):
        return ctx.call("peek", 1024)

    b.start("send", (5, 64), finish=peek)
    srv_b = peer.accept(5)
    assert b.join(5)
    assert b.result == 0
    assert sentinel.to_bytes(4, "little") not in srv_b.recv(64)
    peer.close()


def test_connect_write_reaches_agent(runtime):
    peer = runtime.network.listen("peer", 6)
    msg = codec.encode(codec.SetupRequest(1, 1))

    def put(ctx):
        ctx.write(1024, msg)
        return (6, len(msg))

    inst = runtime.spawn_instance(load(runtime, "echo", [("peer", 6)]))
    inst.start("send", init=put)
    srv = peer.accept(5)
    assert inst.join(5) and inst.exit_code == len(msg)
    assert codec.decode(srv.recv(256)) == codec.SetupRequest(1, 1)
    assert inst.sockets.opened == [("connect", "peer", 6)]
    peer.close()


def test_connect_forbidden_and_fault(runtime):
    inst = runtime.spawn_instance(load(runtime, "echo", [("peer", 6)]))
    inst.start("connect", (80,))
    assert inst.join(5) and inst.exit_code == -13  # EACCES
    inst = runtime.spawn_instance(load(runtime, "echo"))
    inst.start("read_at", (1 << 20, 16))
    assert inst.join(5) and inst.exit_code == -14  # EFAULT
    inst = runtime.spawn_instance(load(runtime, "echo"))
    inst.start("read_at", (0, 16))
    assert inst.join(5) and inst.exit_code == -9  # EBADF


def test_first_descriptor_is_three(runtime):
    peer = runtime.network.listen("peer", 8)
    inst = runtime.spawn_instance(load(runtime, "echo", [("peer", 8)])).start("connect", (8,))
    assert inst.join(5) and inst.exit_code == FIRST_FD
    peer.close()


def test_zero_budget_makes_no_progress(runtime):
    inst = runtime.spawn_instance(load(runtime, "load"), GasBudget(0)).start("saturate")
    recs = []
    for rec in runtime.run_window_scheduler([inst], duration_us=100_000):
        recs.append(rec)
    assert len(recs) >= 5
    assert all(r.instructions_used == 0 for r in recs)
    assert inst.meter.total_used == 0


def test_unlimited_never_suspends(runtime):
    inst = runtime.spawn_instance(load(runtime, "load")).start("saturate")
    recs = list(runtime.run_window_scheduler([inst], duration_us=100_000))
    assert recs and not any(r.suspended for r in recs)


def test_budgeted_window_usage(runtime):
    budget = 300_000
    inst = runtime.spawn_instance(load(runtime, "load"), GasBudget(budget)).start("saturate")
    assert wait_state(inst, lambda i: i.state is InstanceState.SUSPENDED)
    recs = list(runtime.run_window_scheduler([inst], duration_us=100_000))
    full = [r for r in recs[2:] if r.suspended]
    assert len(full) >= 5
    for r in recs:
        assert r.instructions_used <= budget + EPSILON
    for r in full:
        # stops short of B by at most one basic block
        assert budget - 64 <= r.instructions_used <= budget


def test_instruction_usage_queries(runtime):
    inst = runtime.spawn_instance(load(runtime, "checksum"))
    with pytest.raises(UnknownWindow):
        runtime.instruction_usage(inst, runtime.clock.current() + 100)


def test_idle_instance_uses_almost_nothing(runtime):
    peer = runtime.network.listen("peer", 9)
    inst = runtime.spawn_instance(load(runtime, "echo", [("peer", 9)])).start("recv", (9, 16))
    srv = peer.accept(5)
    time.sleep(0.05)
    w = runtime.clock.current()
    time.sleep(0.1)
    for k in range(w, w + 8):
        assert runtime.instruction_usage(inst, k).instructions_used < 100
    srv.sendall(b"x")
    assert inst.join(5) and inst.exit_code == 1
    peer.close()


def test_resume_preserves_state(runtime):
    n = 10**7
    h = load(runtime, "checksum")
    free = runtime.spawn_instance(h).start("checksum", (n,))
    assert free.join(60)
    metered = runtime.spawn_instance(h, GasBudget(5_000_000)).start("checksum", (n,))
    assert metered.join(120)
    assert metered.meter.closed_records() and any(r.suspended for r in metered.meter.closed_records())
    assert metered.result == free.result
    assert metered.meter.total_used == free.meter.total_used


def test_calibration():
    rt = Runtime()
    with pytest.raises(CalibrationTooShort):
        rt.calibrate_capacity(0)
    a = rt.calibrate_capacity(1_000_000)
    b = rt.calibrate_capacity(1_000_000)
    assert a > 0 and abs(a - b) / max(a, b) < 0.10
    assert rt.capacity == b


def test_percent_budget_resolution(runtime):
    h = runtime.load_module(ModuleManifest("c", guest_path("checksum"), budget=GasBudget(1)))
    runtime.capacity = 1_000_001
    inst = runtime.spawn_instance(h, PercentBudget(60))
    assert inst.budget == GasBudget(600_000)
    with pytest.raises(ValueError):
        runtime.spawn_instance(h, GasBudget(5, window_us=1000))
