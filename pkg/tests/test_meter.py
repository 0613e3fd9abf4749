import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dappbox.host.manifest import ModuleManifest, PercentBudget, parse_budget
from dappbox.host.meter import UNLIMITED, GasBudget, InstanceStopped, Meter, UnknownWindow, WindowClock


class FakeClock:
    def __init__(self):
        self.t = 0

    def __call__(self):
        return self.t


def make(budget=UNLIMITED, chunk=1000, window_us=10_000):
    fc = FakeClock()
    return fc, Meter(1, WindowClock(window_us, fc, t0_ns=0), budget, chunk)


def test_percent_budget_rounds_down():
    assert GasBudget.percent(60, 1001).instructions_per_window == 600
    assert PercentBudget(20).resolve(1000) == GasBudget(200)
    with pytest.raises(ValueError):
        GasBudget(-1)


def test_manifest_budget_forms(tmp_path):
    assert parse_budget("unlimited") is UNLIMITED
    assert parse_budget({"percent": 20}) == PercentBudget(20.0)
    assert parse_budget({"instructions_per_window": 5, "window_us": 100}) == GasBudget(5, 100)
    m = ModuleManifest("x", "a.wasm", [{"host": "agent", "port": 1}], GasBudget(5))
    assert ModuleManifest.from_dict(m.to_dict()) == m
    with pytest.raises(ValueError):
        ModuleManifest("x", "a.wasm", [("agent", 70000)])


def test_unlimited_grants_full_chunk():
    _, m = make()
    assert m.refuel(0, 10) == 1000
    assert m.refuel(0, 10) == 1000
    assert m.total_used == 1000


def test_grant_capped_by_remaining_budget():
    fc, m = make(GasBudget(2500))
    assert m.refuel(0, 1) == 1000
    assert m.refuel(0, 1) == 1000
    assert m.refuel(0, 1) == 500
    fc.t = 10_000_000
    assert m.flush(0) == 1000
    u = m.usage(0)
    assert u.instructions_used == 2500 and u.budget == 2500


def test_zero_budget_never_runs():
    _, m = make(GasBudget(0))
    assert m.flush(0) == 0
    m.stop.set()
    with pytest.raises(InstanceStopped):
        m.refuel(0, 1)
    assert m.total_used == 0


def test_unknown_window():
    fc, m = make()
    with pytest.raises(UnknownWindow):
        m.usage(5)
    fc.t = 30_000_000
    m.poll()
    assert m.usage(2).instructions_used == 0
    assert m.usage(3).window_index == 3


def test_refuel_suspends_until_next_window():
    clock = WindowClock(20_000)
    m = Meter(1, clock, GasBudget(100), chunk=100)
    assert m.refuel(0, 1) == 100
    w0 = clock.current()
    t0 = time.monotonic()
    assert m.refuel(0, 50) == 100  # blocks until the next window
    assert clock.current() > w0
    assert time.monotonic() - t0 < 0.1
    m.poll()
    assert m.records[w0].suspended


def test_stop_unblocks_suspended_guest():
    m = Meter(1, WindowClock(1_000_000), GasBudget(10), chunk=10)
    m.refuel(0, 1)
    out = []

    def guest():
        try:
            m.refuel(0, 5)
        except InstanceStopped:
            out.append("stopped")

    t = threading.Thread(target=guest)
    t.start()
    time.sleep(0.05)
    m.stop.set()
    t.join(2)
    assert out == ["stopped"]


def test_stale_grant_windows_are_unbudgeted():
    fc, m = make(UNLIMITED, chunk=1000)
    m.refuel(0, 1)  # 1000 granted with no limit
    m.set_budget(GasBudget(100))
    fc.t = 10_000_000
    m.poll()
    assert m.usage(0).budget is None
    fc.t = 20_000_000
    m.flush(0)  # old grant is booked to the still-open window 1
    assert m.usage(1).budget is None
    assert m.usage(1).instructions_used == 1000
    assert m.usage(2).budget == 100


@given(
    budget=st.integers(0, 5000),
    chunk=st.integers(1, 3000),
    steps=st.lists(st.tuples(st.integers(0, 4000), st.integers(1, 50), st.booleans()), max_size=60),
)
def test_budget_bound_holds(budget, chunk, steps):
    fc, m = make(GasBudget(budget), chunk=chunk)
    granted = m.flush(0)
    for spend, cost, advance in steps:
        remaining = max(granted - spend, 0)  # the guest cannot run past its grant
        if advance:
            fc.t += 10_000_000
        granted = m.flush(remaining)
        if granted >= cost:
            continue
    fc.t += 10_000_000
    m.flush(granted)
    for rec in m.closed_records():
        if rec.budget is not None:
            assert rec.instructions_used <= rec.budget
