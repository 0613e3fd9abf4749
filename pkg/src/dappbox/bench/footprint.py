"""Processing and memory footprint of each arm.

Every arm runs in a fresh child interpreter so that CPU time and peak RSS
belong to that arm alone. The child hosts both the agent and the dApp; the
agent's share is identical across arms, so differences come from the dApp
execution environment. The native child never loads the wasm engine.
"""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from ..dapp.runner import BenchArm


class UnsupportedPlatform(RuntimeError):
    pass


@dataclass(frozen=True)
class FootprintRecord:
    arm: BenchArm
    cpu_time_ms: float
    peak_rss_bytes: int
    loops: int = 0

    def __post_init__(self) -> None:
        if self.cpu_time_ms < 0 or self.peak_rss_bytes < 0:
            raise ValueError("footprint values must be non-negative")


@dataclass
class FootprintReport:
    records: dict[BenchArm, FootprintRecord]

    def ratio(self, attr: str) -> Optional[float]:
        nat = self.records.get(BenchArm.NATIVE)
        box = self.records.get(BenchArm.SANDBOXED)
        if nat is None or box is None or getattr(nat, attr) == 0:
            return None
        return getattr(box, attr) / getattr(nat, attr)

    @property
    def cpu_ratio(self) -> Optional[float]:
        return self.ratio("cpu_time_ms")

    @property
    def memory_ratio(self) -> Optional[float]:
        return self.ratio("peak_rss_bytes")

    @property
    def predicates(self) -> dict[str, bool]:
        preds = {f"{a.value}_cpu_positive": r.cpu_time_ms > 0 for a, r in self.records.items()}
        if self.memory_ratio is not None:
            preds["sandbox_memory_ratio_gt_1"] = self.memory_ratio > 1
        return preds

    @property
    def passed(self) -> bool:
        return all(self.predicates.values())


def _usage() -> tuple[float, int]:
    try:
        import resource
    except ImportError as exc:
        raise UnsupportedPlatform("the resource module is unavailable") from exc
    ru = resource.getrusage(resource.RUSAGE_SELF)
    cpu_ms = (ru.ru_utime + ru.ru_stime) * 1000.0
    # ru_maxrss survives fork+exec on Linux, so a large parent inflates every
    # child; VmHWM belongs to this address space alone
    hwm = _vm_hwm()
    if hwm is not None:
        return cpu_ms, hwm
    if ru.ru_maxrss <= 0:
        raise UnsupportedPlatform("peak RSS is not reported on this platform")
    # Linux reports kilobytes, macOS bytes
    scale = 1 if sys.platform == "darwin" else 1024
    return cpu_ms, ru.ru_maxrss * scale


def _vm_hwm() -> Optional[int]:
    try:
        with open("/proc/self/status") as f:
            for line in f:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return None


def _child(arm: BenchArm, duration_us: int, seed: Optional[int]) -> dict:
    from ..dapp.runner import run_closed_loop
    from .latency import latency_scenario

    period_us = 1000
    scenario = latency_scenario(max(1, duration_us // period_us), seed, period_us)
    runtime = None
    if arm is BenchArm.SANDBOXED:
        from ..host.runtime import Runtime

        runtime = Runtime()
    res = run_closed_loop(arm, scenario, runtime=runtime, timeout=duration_us / 1e6 + 60)
    if arm is BenchArm.NATIVE and "wasmtime" in sys.modules:
        raise RuntimeError("native arm loaded the wasm engine")
    cpu_ms, rss = _usage()
    return {
        "arm": arm.value, "cpu_time_ms": cpu_ms, "peak_rss_bytes": rss,
        "loops": int(res.dapp.controls_sent), "exit_code": res.dapp.exit_code,
    }


def measure_arm(arm: BenchArm, duration_us: int, seed: Optional[int] = None, timeout: float = 600) -> FootprintRecord:
    cmd = [sys.executable, "-m", "dappbox.bench.footprint", "--arm", arm.value, "--duration-us", str(duration_us)]
    if seed is not None:
        cmd += ["--seed", str(seed)]
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0:
        if "UnsupportedPlatform" in proc.stderr:
            raise UnsupportedPlatform(proc.stderr.strip().splitlines()[-1])
        raise RuntimeError(f"footprint child for {arm.value} failed:\n{proc.stderr}")
    data = json.loads(proc.stdout.strip().splitlines()[-1])
    if data["exit_code"] != 0:
        raise RuntimeError(f"{arm.value} dApp exited with {data['exit_code']}")
    return FootprintRecord(arm, data["cpu_time_ms"], data["peak_rss_bytes"], data["loops"])


def run_footprint(
    arms: Iterable[BenchArm] = (BenchArm.NATIVE, BenchArm.SANDBOXED),
    duration_us: int = 5_000_000,
    out_dir=None,
    seed: Optional[int] = None,
) -> FootprintReport:
    _usage()  # fail early when the platform cannot report peak RSS
    report = FootprintReport({arm: measure_arm(arm, duration_us, seed) for arm in arms})
    if out_dir is not None:
        write_outputs(report, out_dir)
    return report


def write_outputs(report: FootprintReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "footprint.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "cpu_time_ms", "peak_rss_bytes", "loops"])
        for r in report.records.values():
            w.writerow([r.arm.value, f"{r.cpu_time_ms:.1f}", r.peak_rss_bytes, r.loops])
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="footprint child process (one arm)")
    ap.add_argument("--arm", required=True)
    ap.add_argument("--duration-us", type=int, required=True)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args(argv)
    print(json.dumps(_child(BenchArm.parse(args.arm), args.duration_us, args.seed)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
