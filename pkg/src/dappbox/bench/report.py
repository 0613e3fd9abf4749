"""Summary report over the three scenario outputs, plus gnuplot data files."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import isolation

ISOLATION_FILES = ("usage.csv", "isolation.json")
LATENCY_FILE = "latency_summary.csv"
FOOTPRINT_FILE = "footprint.csv"


class MissingInput(FileNotFoundError):
    pass


@dataclass
class Report:
    text: str
    passed: bool
    data_files: list[Path] = field(default_factory=list)


def _require(directory: Path, names) -> None:
    missing = [n for n in names if not (directory / n).exists()]
    if missing:
        raise MissingInput(f"{directory}: missing {', '.join(missing)}")


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _isolation_section(d: Path, lines: list[str], files: list[Path]) -> bool:
    v = isolation.evaluate(d)
    lines += [
        "Isolation (share of calibrated capacity, %)",
        f"  phase 1 mean      regular {v.phase1_regular:6.2f}  misbehaving {v.phase1_misbehaving:6.2f}  {_verdict(v.phase1_ok)}",
        f"  phase 2 min       regular {v.phase2_min_regular:6.2f}                      {_verdict(v.phase2_ok)}",
        f"  phase 3 worst dev {v.phase3_worst_dev_pp:6.2f} pp                            {_verdict(v.phase3_ok)}",
        f"  budget bound      worst excess {v.budget_bound_worst_excess} fuel           {_verdict(v.budget_bound_ok)}",
        "",
    ]
    dat = d / "isolation_shares.dat"
    with open(dat, "w") as f:
        f.write("# t_ms regular_pct misbehaving_pct phase\n")
        for r in v.rows:
            f.write(f"{r.t_ms:.1f} {r.regular_pct:.3f} {r.misbehaving_pct:.3f} {r.phase}\n")
    files.append(dat)
    return v.passed


def _latency_section(d: Path, lines: list[str], files: list[Path]) -> bool:
    rows = list(csv.DictReader(open(d / LATENCY_FILE, newline="")))
    lines.append("Control-loop latency (us)      median      p90      p99")
    ok = True
    for r in rows:
        if r["arm"] == "predicate":
            ok &= r["median_us"] == "1"
        elif r["arm"] == "sandbox/native":
            lines.append(f"  sandbox/native cumulative ratio {float(r['median_us']):.2f}")
        else:
            lines.append(
                f"  {r['arm']:8s} {r['metric']:15s} {float(r['median_us']):9.1f} {float(r['p90_us']):8.1f} {float(r['p99_us']):8.1f}"
            )
    lines.append(f"  predicates {_verdict(ok)}")
    lines.append("")
    for arm_csv in sorted(d.glob("latency_*.csv")):
        if arm_csv.name == LATENCY_FILE:
            continue
        data = np.genfromtxt(arm_csv, delimiter=",", names=True)
        cum = np.sort(np.atleast_1d(data["cumulative_us"]))
        dat = d / f"{arm_csv.stem}_cdf.dat"
        with open(dat, "w") as f:
            f.write("# cumulative_us cdf\n")
            for i, x in enumerate(cum):
                f.write(f"{x:.0f} {(i + 1) / len(cum):.5f}\n")
        files.append(dat)
    return ok


def _footprint_section(d: Path, lines: list[str], files: list[Path]) -> bool:
    rows = {r["arm"]: r for r in csv.DictReader(open(d / FOOTPRINT_FILE, newline=""))}
    lines.append("Footprint                 cpu_time_ms   peak_rss_MiB")
    for arm, r in rows.items():
        lines.append(f"  {arm:22s} {float(r['cpu_time_ms']):11.1f} {int(r['peak_rss_bytes']) / 2**20:14.1f}")
    ok = all(float(r["cpu_time_ms"]) > 0 for r in rows.values())
    if "native" in rows and "sandbox" in rows:
        cpu = float(rows["sandbox"]["cpu_time_ms"]) / float(rows["native"]["cpu_time_ms"])
        mem = int(rows["sandbox"]["peak_rss_bytes"]) / int(rows["native"]["peak_rss_bytes"])
        lines.append(f"  sandbox/native ratios  cpu {cpu:.2f}  memory {mem:.2f}")
        ok &= mem > 1
    lines.append(f"  predicates {_verdict(ok)}")
    lines.append("")
    dat = d / "footprint.dat"
    with open(dat, "w") as f:
        f.write("# arm cpu_time_ms peak_rss_bytes\n")
        for arm, r in rows.items():
            f.write(f"{arm} {r['cpu_time_ms']} {r['peak_rss_bytes']}\n")
    files.append(dat)
    return ok


def report(in_dir) -> Report:
    """Summarize ``in_dir`` (outputs of all three scenarios); data files are written next to the inputs."""
    d = Path(in_dir)
    if not d.is_dir():
        raise MissingInput(f"{d} is not a directory")
    _require(d, ISOLATION_FILES + (LATENCY_FILE, FOOTPRINT_FILE))
    lines: list[str] = []
    files: list[Path] = []
    ok = _isolation_section(d, lines, files)
    ok &= _latency_section(d, lines, files)
    ok &= _footprint_section(d, lines, files)
    lines.append(f"Overall: {_verdict(ok)}")
    text = "\n".join(lines) + "\n"
    (d / "summary.txt").write_text(text)
    return Report(text, ok, files)
