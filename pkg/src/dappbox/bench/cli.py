"""``bench`` command line: isolation, latency, footprint and report scenarios.

Each subcommand writes only under its output directory and exits 0 exactly
when every acceptance predicate of that scenario holds.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from ..dapp.runner import BenchArm


def _seed_override() -> int | None:
    raw = os.environ.get("BENCH_SEED")
    return int(raw) if raw is not None else None


def cmd_isolation(args) -> int:
    from ..host.runtime import Runtime
    from . import isolation

    scn = isolation.IsolationScenario.load(args.scenario) if args.scenario else isolation.IsolationScenario()
    if _seed_override() is not None:
        scn = replace(scn, seed=_seed_override())
    ok = True
    for rep in range(args.repeats):
        out = Path(args.out) if args.repeats == 1 else Path(args.out) / f"repeat_{rep}"
        rt = Runtime(window_us=scn.window_us)
        cap = rt.calibrate_capacity(args.calibration_us)
        res = isolation.run_isolation(scn, rt, out)
        v = res.verdict
        print(f"capacity {cap} fuel/window")
        print(f"phase1 regular={v.phase1_regular:.2f}% misbehaving={v.phase1_misbehaving:.2f}% {'PASS' if v.phase1_ok else 'FAIL'}")
        print(f"phase2 min regular={v.phase2_min_regular:.2f}% {'PASS' if v.phase2_ok else 'FAIL'}")
        print(f"phase3 worst deviation={v.phase3_worst_dev_pp:.2f}pp {'PASS' if v.phase3_ok else 'FAIL'}")
        print(f"budget bound worst excess={v.budget_bound_worst_excess} {'PASS' if v.budget_bound_ok else 'FAIL'}")
        ok &= v.passed
    return 0 if ok else 1


def cmd_latency(args) -> int:
    from .latency import METRICS, run_latency

    arms = [BenchArm.parse(a) for a in args.arms.split(",") if a.strip()]
    rep = run_latency(arms, args.loops, args.out, seed=_seed_override(), repeats=args.repeats)
    for arm, a in rep.arms.items():
        for m in METRICS:
            p50, p90, p99 = a.stats(m)
            print(f"{arm.value:8s} {m:15s} median={p50:9.1f} p90={p90:9.1f} p99={p99:9.1f}")
    if rep.overhead_ratio is not None:
        print(f"sandbox/native cumulative ratio {rep.overhead_ratio:.2f}")
    for name, ok in rep.predicates.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_footprint(args) -> int:
    from .footprint import run_footprint

    arms = [BenchArm.parse(a) for a in args.arms.split(",") if a.strip()]
    ok = True
    for rep_i in range(args.repeats):
        out = Path(args.out) if args.repeats == 1 else Path(args.out) / f"repeat_{rep_i}"
        rep = run_footprint(arms, int(args.duration_s * 1e6), out, seed=_seed_override())
        for r in rep.records.values():
            print(f"{r.arm.value:8s} cpu_time_ms={r.cpu_time_ms:.1f} peak_rss_bytes={r.peak_rss_bytes}")
        if rep.cpu_ratio is not None:
            print(f"sandbox/native cpu ratio {rep.cpu_ratio:.2f} memory ratio {rep.memory_ratio:.2f}")
        for name, good in rep.predicates.items():
            print(f"{name}: {'PASS' if good else 'FAIL'}")
        ok &= rep.passed
    return 0 if ok else 1


def cmd_report(args) -> int:
    from .report import report

    rep = report(args.in_dir)
    sys.stdout.write(rep.text)
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="dApp sandbox benchmarks")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("isolation", help="three-phase noisy-neighbour experiment")
    p.add_argument("--scenario", help="JSON file with IsolationScenario fields")
    p.add_argument("--out", required=True)
    p.add_argument("--calibration-us", type=int, default=1_000_000)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_isolation)

    p = sub.add_parser("latency", help="per-stage control-loop latency")
    p.add_argument("--arms", default="native,sandbox")
    p.add_argument("--loops", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("footprint", help="CPU time and peak RSS per arm")
    p.add_argument("--arms", default="native,sandbox")
    p.add_argument("--duration-s", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_footprint)

    p = sub.add_parser("report", help="summarize a directory of scenario outputs")
    p.add_argument("--in", dest="in_dir", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if getattr(args, "repeats", 1) < 1:
        print("--repeats must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # report domain errors as a failed run, not a traceback
        if args.verbose:
            raise
        print(f"bench {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
