"""Control-loop latency: per-stage timings of the sensing dApp, sandboxed vs native."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .._gc import gc_paused
from ..agent import Incumbent, ScenarioConfig
from ..dapp.runner import STAGE_FIELDS, STAGES, BenchArm, LoopResult, run_closed_loop

REALTIME_BOUND_US = 10_000
DEFAULT_SEED = 2024
METRICS = STAGES + ("cumulative_us", "rtt_us")


class InsufficientLoops(RuntimeError):
    pass


def latency_scenario(loops: int, seed: Optional[int] = None, period_us: int = 1000) -> ScenarioConfig:
    """Two incumbents at 20 dB SNR, one frame per loop."""
    if seed is None:
        seed = int(os.environ.get("BENCH_SEED", DEFAULT_SEED))
    return ScenarioConfig(
        noise_sigma=ScenarioConfig.sigma_for_snr(1.0, 20.0),
        incumbents=(Incumbent(3, 1.0), Incumbent(40, 1.0)),
        indication_period_us=period_us,
        duration_us=loops * period_us,
        seed=seed,
    )


@dataclass
class ArmLatency:
    arm: BenchArm
    table: np.ndarray  # rows: loops; columns: ("repeat", "seq") + STAGE_FIELDS[1:] + ("rtt_us",)
    columns: tuple = ()

    def column(self, name: str) -> np.ndarray:
        return self.table[:, self.columns.index(name)]

    def stats(self, metric: str) -> tuple[float, float, float]:
        v = self.column(metric)
        return tuple(float(x) for x in np.percentile(v, [50, 90, 99]))

    def median(self, metric: str = "cumulative_us") -> float:
        return float(np.median(self.column(metric)))


@dataclass
class LatencyReport:
    loops: int
    arms: dict[BenchArm, ArmLatency]
    overhead_ratio: Optional[float] = None
    predicates: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.predicates.values())


COLUMNS = ("repeat", "seq") + STAGE_FIELDS[1:] + ("rtt_us",)


def _arm_table(results: list[LoopResult], loops: int) -> np.ndarray:
    rows = []
    for rep, res in enumerate(results):
        if res.dapp.exit_code != 0:
            raise InsufficientLoops(f"{res.arm.value} dApp exited with {res.dapp.exit_code} ({res.dapp.trap})")
        rtt = {r.seq: r.rtt_us for r in res.agent.loop_records()}
        stages = res.dapp.stages
        answered = sum(1 for s in stages[:, 0] if int(s) in rtt)
        if answered < loops:
            raise InsufficientLoops(f"{res.arm.value}: {answered} of {loops} indications answered")
        for rec in stages:
            seq = int(rec[0])
            if seq in rtt:
                rows.append((rep, seq, *rec[1:].tolist(), rtt[seq]))
    return np.array(rows, dtype=np.int64).reshape(-1, len(COLUMNS))


def run_latency(
    arms: Iterable[BenchArm] = (BenchArm.NATIVE, BenchArm.SANDBOXED),
    loops: int = 1000,
    out_dir=None,
    seed: Optional[int] = None,
    repeats: int = 1,
    runtime=None,
) -> LatencyReport:
    if loops <= 0:
        raise ValueError("loops must be positive")
    scenario = latency_scenario(loops, seed)
    report = LatencyReport(loops, {})
    for arm in arms:
        results = []
        for _ in range(repeats):
            rt = runtime
            if arm is BenchArm.SANDBOXED and rt is None:
                from ..host.runtime import Runtime

                rt = Runtime()
            with gc_paused():
                results.append(run_closed_loop(arm, scenario, runtime=rt if arm is BenchArm.SANDBOXED else None))
        report.arms[arm] = ArmLatency(arm, _arm_table(results, loops), COLUMNS)

    nat = report.arms.get(BenchArm.NATIVE)
    box = report.arms.get(BenchArm.SANDBOXED)
    for a in report.arms.values():
        stage_sum = sum(a.column(s) for s in STAGES)
        report.predicates[f"{a.arm.value}_stage_sum"] = bool(np.all(np.abs(stage_sum - a.column("cumulative_us")) <= 1))
    if box is not None:
        report.predicates["sandbox_realtime"] = box.median() < REALTIME_BOUND_US
    if nat is not None and box is not None:
        report.predicates["native_not_slower"] = nat.median() <= box.median()
        if nat.median() > 0:
            report.overhead_ratio = box.median() / nat.median()
    if out_dir is not None:
        write_outputs(report, out_dir)
    return report


def write_outputs(report: LatencyReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for arm, a in report.arms.items():
        with open(out / f"latency_{arm.value}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(a.columns)
            w.writerows(a.table.tolist())
    with open(out / "latency_summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "metric", "median_us", "p90_us", "p99_us"])
        for arm, a in report.arms.items():
            for m in METRICS:
                w.writerow([arm.value, m, *(f"{x:.1f}" for x in a.stats(m))])
        if report.overhead_ratio is not None:
            w.writerow(["sandbox/native", "cumulative_ratio", f"{report.overhead_ratio:.2f}", "", ""])
        for name, ok in report.predicates.items():
            w.writerow(["predicate", name, int(ok), "", ""])
    return out
