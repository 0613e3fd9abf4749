"""Noisy-neighbour isolation experiment.

Two synthetic-load guests share the host. A ticker queues one tick for each
guest just before every window opens, and a guest burns a fixed number of
instructions per tick,
sized to a percentage of calibrated capacity. At ``saturation_at_us`` the
misbehaving guest switches to an unbounded busy loop; at
``metering_on_at_us`` both guests get windowed budgets equal to their
intended percentages.

A guest's share of a window is its fuel used divided by capacity. Shares are
averaged over ``avg_window_us`` and checked per phase. All predicates are
computed from ``usage.csv`` plus ``isolation.json``, so they can be re-run
offline with :func:`evaluate`.
"""

from __future__ import annotations

import csv
import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .._gc import gc_paused
from ..guests import guest_path
from ..host.manifest import ModuleManifest
from ..host.meter import EPSILON, UNLIMITED, GasBudget, WindowUsage
from ..host.runtime import Runtime

REGULAR = "regular"
MISBEHAVING = "misbehaving"
TICK = b"\x01"
SATURATE = b"\x02"
REGULAR_PORT = 7001
MISBEHAVING_PORT = 7002
TICK_LEAD_US = 1000

PHASE1_REL_TOL = 0.10
PHASE3_ABS_TOL_PP = 5.0


class CalibrationMissing(RuntimeError):
    pass


@dataclass(frozen=True)
class IsolationScenario:
    regular_budget_pct: float = 60.0
    misbehaving_initial_pct: float = 20.0
    saturation_at_us: int = 2_000_000
    metering_on_at_us: int = 3_000_000
    total_us: int = 5_000_000
    window_us: int = 10_000
    avg_window_us: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        for pct in (self.regular_budget_pct, self.misbehaving_initial_pct):
            if not 0 < pct <= 100:
                raise ValueError(f"percentage {pct} outside (0, 100]")
        if not 0 < self.saturation_at_us < self.metering_on_at_us < self.total_us:
            raise ValueError("need 0 < saturation_at < metering_on_at < total")
        if self.avg_window_us % self.window_us:
            raise ValueError("avg_window_us must be a multiple of window_us")

    @property
    def windows_per_avg(self) -> int:
        return self.avg_window_us // self.window_us

    @property
    def n_windows(self) -> int:
        return self.total_us // self.window_us

    def phase_of(self, t_us: int) -> int:
        if t_us < self.saturation_at_us:
            return 1
        return 2 if t_us < self.metering_on_at_us else 3

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationScenario":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    @classmethod
    def load(cls, path) -> "IsolationScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ShareRow:
    avg_index: int
    t_ms: float
    phase: int
    regular_pct: float
    misbehaving_pct: float


@dataclass
class IsolationVerdict:
    phase1_regular: float
    phase1_misbehaving: float
    phase1_ok: bool
    phase2_min_regular: float
    phase2_ok: bool
    phase3_worst_dev_pp: float
    phase3_ok: bool
    budget_bound_ok: bool
    budget_bound_worst_excess: int
    rows: list[ShareRow] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.phase1_ok and self.phase2_ok and self.phase3_ok and self.budget_bound_ok


@dataclass
class IsolationResult:
    scenario: IsolationScenario
    capacity: int
    spin_cost: float
    names: dict[int, str]
    records: list[WindowUsage]
    verdict: IsolationVerdict
    out_dir: Optional[Path] = None


# -- load-guest sizing ------------------------------------------------------------------------


def measure_spin_cost(runtime: Runtime, n: int = 1_000_000) -> tuple[float, float]:
    """Fuel of ``spin(k)`` as ``a + b*k``, from two unmetered runs."""
    module = runtime.load_module(ModuleManifest("spin-probe", guest_path("load")))
    used = []
    for k in (n, 2 * n):
        inst = runtime.spawn_instance(module, UNLIMITED).start("spin", (k,))
        inst.join(30)
        used.append(inst.meter.total_used)
    b = (used[1] - used[0]) / n
    return used[0] - b * n, b


def iterations_for(pct: float, capacity: int, spin: tuple[float, float]) -> int:
    a, b = spin
    return max(1, int(round((pct / 100.0 * capacity - a) / b)))


# -- experiment ----------------------------------------------------------------------------------


class _Ticker(threading.Thread):
    """Wakes both guests at every window boundary and drives the phase changes."""

    def __init__(self, runtime: Runtime, scn: IsolationScenario, t0_ns: int, on_metering) -> None:
        super().__init__(name="isolation-ticker", daemon=True)
        self.rt = runtime
        self.scn = scn
        self.t0_ns = t0_ns
        self.on_metering = on_metering
        self.listeners = {
            REGULAR: runtime.network.listen("ticker", REGULAR_PORT),
            MISBEHAVING: runtime.network.listen("ticker", MISBEHAVING_PORT),
        }
        self.conns: dict = {}
        self.stop = threading.Event()
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        try:
            self._run()
        except BaseException as exc:  # surfaced by the driver
            self.error = exc
        finally:
            for s in self.conns.values():
                s.close()
            for lst in self.listeners.values():
                lst.close()

    def _run(self) -> None:
        for role, lst in self.listeners.items():
            sock = None
            while sock is None and not self.stop.is_set():
                sock = lst.accept(timeout=0.05)
            if sock is None:
                return
            self.conns[role] = sock
        saturated = metered = False
        w = 0
        while not self.stop.is_set():
            # demand for window w is queued just before it opens, so a guest's
            # start never waits on this thread getting the CPU at the boundary
            t_ns = self.t0_ns + w * self.scn.window_us * 1000 - TICK_LEAD_US * 1000
            t_us = w * self.scn.window_us
            if t_us >= self.scn.total_us:
                return
            delay = (t_ns - time.monotonic_ns()) / 1e9
            if delay > 0:
                self.stop.wait(delay)
            if self.stop.is_set():
                return
            if not metered and t_us >= self.scn.metering_on_at_us:
                self.on_metering()
                metered = True
            try:
                self.conns[REGULAR].sendall(TICK)
                if not saturated and t_us >= self.scn.saturation_at_us:
                    self.conns[MISBEHAVING].sendall(SATURATE)
                    saturated = True
                elif not saturated:
                    self.conns[MISBEHAVING].sendall(TICK)
            except OSError:
                if self.stop.is_set():
                    return
                raise
            w += 1


def run_isolation(
    scn: IsolationScenario = IsolationScenario(),
    runtime: Optional[Runtime] = None,
    out_dir=None,
    spin_cost: Optional[tuple[float, float]] = None,
) -> IsolationResult:
    """Run the three-phase experiment; ``runtime.capacity`` must already be calibrated."""
    if runtime is None or runtime.capacity is None:
        raise CalibrationMissing("calibrate_capacity() must run before the isolation experiment")
    if runtime.window_us != scn.window_us:
        raise ValueError(f"runtime window {runtime.window_us} us != scenario window {scn.window_us} us")
    cap = runtime.capacity
    spin = spin_cost or measure_spin_cost(runtime)

    module = runtime.load_module(
        ModuleManifest(
            "load", guest_path("load"), (("ticker", REGULAR_PORT), ("ticker", MISBEHAVING_PORT))
        )
    )
    plan = {
        REGULAR: (REGULAR_PORT, scn.regular_budget_pct),
        MISBEHAVING: (MISBEHAVING_PORT, scn.misbehaving_initial_pct),
    }
    with gc_paused():
        # windows are numbered from the start of the experiment, first boundary slightly ahead
        runtime.reset_clock()
        t0_ns = runtime.clock.start_ns(runtime.clock.current() + 2)
        runtime.clock.t0_ns = t0_ns
        insts = {role: runtime.spawn_instance(module, UNLIMITED) for role in plan}

        def metering_on() -> None:
            for role, (_, pct) in plan.items():
                insts[role].set_budget(GasBudget.percent(pct, cap, scn.window_us))

        ticker = _Ticker(runtime, scn, t0_ns, metering_on)
        ticker.start()
        for role, (port, pct) in plan.items():
            insts[role].start("run", (port, iterations_for(pct, cap, spin)))

        records: list[WindowUsage] = []
        try:
            limit_us = scn.total_us + 10 * scn.window_us
            for rec in runtime.run_window_scheduler(insts.values(), duration_us=limit_us):
                if rec.window_index < scn.n_windows:
                    records.append(rec)
                if runtime.clock.current() >= scn.n_windows + 1:
                    break
        finally:
            ticker.stop.set()
            for inst in insts.values():
                inst.kill()
            for inst in insts.values():
                inst.join(5)
            ticker.join(5)
    if ticker.error is not None:
        raise ticker.error

    names = {inst.instance_id: role for role, inst in insts.items()}
    # late records flushed by kill() for windows already past are still valid closed windows
    seen = {(r.instance_id, r.window_index) for r in records}
    for inst in insts.values():
        for r in inst.meter.closed_records():
            if r.window_index < scn.n_windows and (r.instance_id, r.window_index) not in seen:
                records.append(r)
    records.sort(key=lambda r: (r.window_index, r.instance_id))
    verdict = evaluate_records(records, names, cap, scn)
    result = IsolationResult(scn, cap, spin[1], names, records, verdict)
    if out_dir is not None:
        result.out_dir = write_outputs(result, out_dir)
    return result


# -- output and offline evaluation -----------------------------------------------------------------


USAGE_HEADER = ["instance", "window_index", "t_ms", "instructions_used", "budget", "suspended"]


def write_usage_csv(path, records, names: dict[int, str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(USAGE_HEADER)
        for r in records:
            w.writerow([
                names.get(r.instance_id, r.instance_id), r.window_index, f"{r.t_ms:.3f}",
                r.instructions_used, "" if r.budget is None else r.budget, int(r.suspended),
            ])


def read_usage_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append({
                "instance": row["instance"],
                "window_index": int(row["window_index"]),
                "t_ms": float(row["t_ms"]),
                "instructions_used": int(row["instructions_used"]),
                "budget": int(row["budget"]) if row["budget"] else None,
                "suspended": row["suspended"] in ("1", "true", "True"),
            })
    return rows


def write_outputs(result: IsolationResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_usage_csv(out / "usage.csv", result.records, result.names)
    with open(out / "shares.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["avg_index", "t_ms", "phase", "regular_pct", "misbehaving_pct"])
        for r in result.verdict.rows:
            w.writerow([r.avg_index, f"{r.t_ms:.1f}", r.phase, f"{r.regular_pct:.3f}", f"{r.misbehaving_pct:.3f}"])
    meta = {"scenario": asdict(result.scenario), "capacity": result.capacity, "spin_cost": result.spin_cost}
    (out / "isolation.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def share_rows(rows: list[dict], capacity: int, scn: IsolationScenario) -> list[ShareRow]:
    """Average per-window shares (percent of capacity) over ``avg_window_us`` blocks."""
    k = scn.windows_per_avg
    n_avg = scn.n_windows // k
    used = {REGULAR: np.zeros(n_avg * k), MISBEHAVING: np.zeros(n_avg * k)}
    for r in rows:
        if r["instance"] in used and r["window_index"] < n_avg * k:
            used[r["instance"]][r["window_index"]] = r["instructions_used"]
    shares = {role: 100.0 * u.reshape(n_avg, k).mean(axis=1) / capacity for role, u in used.items()}
    out = []
    for i in range(n_avg):
        t_us = i * scn.avg_window_us
        # an averaging block belongs to a phase only if it lies wholly inside it
        phase = scn.phase_of(t_us) if scn.phase_of(t_us) == scn.phase_of(t_us + scn.avg_window_us - 1) else 0
        out.append(ShareRow(i, t_us / 1000.0, phase, shares[REGULAR][i], shares[MISBEHAVING][i]))
    return out


def budget_excess(rows: list[dict]) -> int:
    """Largest ``used - budget`` over closed windows that ran under a single budget."""
    worst = -(1 << 62)
    for r in rows:
        if r["budget"] is not None:
            worst = max(worst, r["instructions_used"] - r["budget"])
    return worst


def _evaluate(rows: list[dict], capacity: int, scn: IsolationScenario) -> IsolationVerdict:
    shares = share_rows(rows, capacity, scn)
    p1 = [s for s in shares if s.phase == 1]
    p2 = [s for s in shares if s.phase == 2]
    p3 = [s for s in shares if s.phase == 3][1:]  # one averaging window to settle
    reg1 = float(np.mean([s.regular_pct for s in p1])) if p1 else float("nan")
    mis1 = float(np.mean([s.misbehaving_pct for s in p1])) if p1 else float("nan")
    tr, tm = scn.regular_budget_pct, scn.misbehaving_initial_pct
    phase1_ok = bool(p1) and abs(reg1 - tr) <= PHASE1_REL_TOL * tr and abs(mis1 - tm) <= PHASE1_REL_TOL * tm
    min2 = min((s.regular_pct for s in p2), default=float("nan"))
    phase2_ok = bool(p2) and min2 < reg1
    dev3 = max(
        (max(abs(s.regular_pct - tr), abs(s.misbehaving_pct - tm)) for s in p3), default=float("inf")
    )
    phase3_ok = bool(p3) and dev3 <= PHASE3_ABS_TOL_PP
    excess = budget_excess(rows)
    budgeted = any(r["budget"] is not None for r in rows)
    return IsolationVerdict(
        reg1, mis1, phase1_ok, min2, phase2_ok, dev3, phase3_ok,
        budgeted and excess <= EPSILON, excess if budgeted else 0, shares,
    )


def evaluate_records(records, names, capacity: int, scn: IsolationScenario) -> IsolationVerdict:
    rows = [
        {
            "instance": names.get(r.instance_id, str(r.instance_id)),
            "window_index": r.window_index,
            "instructions_used": r.instructions_used,
            "budget": r.budget,
        }
        for r in records
    ]
    return _evaluate(rows, capacity, scn)


def evaluate(out_dir) -> IsolationVerdict:
    """Re-derive every isolation predicate from files written by :func:`run_isolation`."""
    out = Path(out_dir)
    meta = json.loads((out / "isolation.json").read_text())
    return _evaluate(
        read_usage_csv(out / "usage.csv"), int(meta["capacity"]), IsolationScenario.from_dict(meta["scenario"])
    )


def scenario_with_env_seed(scn: IsolationScenario) -> IsolationScenario:
    seed = os.environ.get("BENCH_SEED")
    if seed is None:
        return scn
    from dataclasses import replace

    return replace(scn, seed=int(seed))
