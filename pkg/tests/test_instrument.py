import wasmtime
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dappbox.guests import SOURCE_DIR, dapp_wasm
from dappbox.host import instrument
from dappbox.host.instrument import InvalidBytecode, parse_module, read_sleb, read_uleb, sleb, uleb

FNV_OFFSET = 1469598103934665603
FNV_PRIME = 1099511628211
M64 = (1 << 64) - 1


def checksum_ref(n: int) -> int:
    h = FNV_OFFSET
    for i in range(n):
        h = ((h ^ i) * FNV_PRIME) & M64
    return h - (1 << 64) if h >> 63 else h


class Harness:
    """Runs an instrumented module directly on wasmtime with a counting refuel."""

    def __init__(self, wat_text: str, chunk: int = 1000):
        self.metered = instrument.instrument(wasmtime.wat2wasm(wat_text))
        engine = wasmtime.Engine()
        self.store = wasmtime.Store(engine)
        self.granted = 0
        self.used = 0
        self.calls = 0
        self.chunk = chunk
        linker = wasmtime.Linker(engine)
        i64 = wasmtime.ValType.i64()
        linker.define_func(
            instrument.METER_MODULE, instrument.REFUEL_NAME,
            wasmtime.FuncType([i64, i64], [i64]), self.refuel,
        )
        self.inst = linker.instantiate(self.store, wasmtime.Module(engine, self.metered.wasm))
        self.fuel = self.inst.exports(self.store)[instrument.FUEL_EXPORT]

    def refuel(self, remaining, cost):
        self.calls += 1
        self.used += self.granted - remaining
        self.granted = max(self.chunk, cost)
        return self.granted

    def call(self, name, *args):
        out = self.inst.exports(self.store)[name](self.store, *args)
        self.used += self.granted - self.fuel.value(self.store)
        self.granted = self.fuel.value(self.store)
        return out


def checksum_wat() -> str:
    return (SOURCE_DIR / "checksum.wat").read_text()


@given(st.integers(0, 2**63 - 1))
def test_leb_round_trip(n):
    assert read_uleb(uleb(n), 0) == (n, len(uleb(n)))
    assert read_sleb(sleb(-n), 0)[0] == -n


@pytest.mark.parametrize("data", [b"", b"\0asm", b"\0asm\x02\0\0\0", b"\0asm\x01\0\0\0\x01\x05\x00"])
def test_rejects_malformed(data):
    with pytest.raises(InvalidBytecode):
        parse_module(data)


@given(st.integers(0, 3000))
@settings(max_examples=30)
def test_semantics_preserved(n):
    h = Harness(checksum_wat())
    assert h.call("checksum", n) == checksum_ref(n)


def test_cost_is_exact_per_iteration():
    # loop body: 12 value instructions + br_if
    per_iter = 13
    used = []
    for n in (1000, 2000, 5000):
        h = Harness(checksum_wat())
        h.call("checksum", n)
        used.append(h.used)
    assert used[1] - used[0] == 1000 * per_iter
    assert used[2] - used[0] == 4000 * per_iter


def test_never_runs_past_grant():
    h = Harness(checksum_wat(), chunk=50)
    h.call("checksum", 10_000)
    assert h.calls >= 10_000 * 13 // 50
    assert h.fuel.value(h.store) >= 0


def test_imports_and_exports_are_renumbered():
    wat = """
    (module
      (import "env" "clock_us" (func $clk (result i64)))
      (table 2 funcref)
      (elem (i32.const 0) $a $b)
      (func $a (result i32) (i32.const 7))
      (func $b (result i32) (i32.add (call $a) (i32.const 1)))
      (func (export "via_table") (param i32) (result i32)
        (call_indirect (result i32) (local.get 0)))
      (func (export "direct") (result i32) (call $b)))
    """
    m = instrument.instrument(wasmtime.wat2wasm(wat))
    assert [(i.module, i.name) for i in m.imports] == [("env", "clock_us")]
    engine = wasmtime.Engine()
    store = wasmtime.Store(engine)
    linker = wasmtime.Linker(engine)
    i64 = wasmtime.ValType.i64()
    linker.define_func("env", "clock_us", wasmtime.FuncType([], [i64]), lambda: 0)
    linker.define_func(
        instrument.METER_MODULE, instrument.REFUEL_NAME,
        wasmtime.FuncType([i64, i64], [i64]), lambda r, c: 1 << 40,
    )
    ex = linker.instantiate(store, wasmtime.Module(engine, m.wasm)).exports(store)
    assert ex["direct"](store) == 8
    assert ex["via_table"](store, 0) == 7
    assert ex["via_table"](store, 1) == 8


def test_compiled_dapp_instruments_and_validates():
    data = dapp_wasm().read_bytes()
    m = instrument.instrument(data)
    wasmtime.Module.validate(wasmtime.Engine(), m.wasm)
    names = {i.name for i in m.imports}
    assert names <= {"sock_connect", "sock_bind", "sock_accept", "sock_read", "sock_write", "sock_close", "clock_us", "proc_exit"}
