import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dappbox.bench import isolation
from dappbox.bench.cli import main
from dappbox.bench.footprint import FootprintRecord, FootprintReport, run_footprint
from dappbox.bench.isolation import (
    MISBEHAVING,
    REGULAR,
    CalibrationMissing,
    IsolationResult,
    IsolationScenario,
    evaluate,
    evaluate_records,
    run_isolation,
)
from dappbox.bench.latency import COLUMNS, InsufficientLoops, _arm_table, latency_scenario, run_latency
from dappbox.bench.report import MissingInput, report
from dappbox.dapp.runner import BenchArm, DappRun, LoopResult, run_closed_loop
from dappbox.agent import E3Agent
from dappbox.guests import cache_dir
from dappbox.host.meter import WindowUsage
from dappbox.host.runtime import Runtime

CAP = 1_000_000


def fake_records(scn, share, budget=None):
    """WindowUsage rows where ``share(role, t_us)`` gives the percent of CAP used."""
    recs = []
    ids = {REGULAR: 1, MISBEHAVING: 2}
    for w in range(scn.n_windows):
        t = w * scn.window_us
        for role, iid in ids.items():
            b = budget(role, t) if budget else None
            recs.append(WindowUsage(iid, w, int(share(role, t) * CAP / 100), False, b, t / 1000))
    return recs, {v: k for k, v in ids.items()}


def ideal(scn):
    def share(role, t):
        if role == REGULAR:
            return 60 if t < scn.saturation_at_us or t >= scn.metering_on_at_us else 35
        return 20 if t < scn.saturation_at_us or t >= scn.metering_on_at_us else 65

    def budget(role, t):
        if t < scn.metering_on_at_us + scn.window_us:
            return None
        return int((60 if role == REGULAR else 20) * CAP / 100)

    return share, budget


def test_scenario_validation(tmp_path):
    with pytest.raises(ValueError):
        IsolationScenario(regular_budget_pct=0)
    with pytest.raises(ValueError):
        IsolationScenario(saturation_at_us=3_000_000, metering_on_at_us=2_000_000)
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"regular_budget_pct": 50, "comment": "ignored"}))
    assert IsolationScenario.load(p).regular_budget_pct == 50


def test_verdict_on_ideal_trace():
    scn = IsolationScenario()
    share, budget = ideal(scn)
    v = evaluate_records(*fake_records(scn, share, budget), CAP, scn)
    assert v.passed
    assert v.phase1_regular == pytest.approx(60) and v.phase2_min_regular == pytest.approx(35)
    assert v.budget_bound_worst_excess == 0
    assert [r.phase for r in v.rows].count(0) == 0
    assert len(v.rows) == 50


def test_verdict_catches_each_failure():
    scn = IsolationScenario()
    share, budget = ideal(scn)

    def off(role, t):  # phase 3 regular drifts to 52 %
        return 52 if role == REGULAR and t >= 4_000_000 else share(role, t)

    v = evaluate_records(*fake_records(scn, off, budget), CAP, scn)
    assert v.phase1_ok and v.phase2_ok and not v.phase3_ok and v.budget_bound_ok

    def no_contention(role, t):
        return 60 if role == REGULAR else 20

    v = evaluate_records(*fake_records(scn, no_contention, budget), CAP, scn)
    assert not v.phase2_ok

    def over(role, t):
        return 61.2 if role == REGULAR and t >= 3_500_000 else share(role, t)

    v = evaluate_records(*fake_records(scn, over, budget), CAP, scn)
    assert not v.budget_bound_ok and v.budget_bound_worst_excess == 12_000


def test_settling_window_is_skipped():
    scn = IsolationScenario()
    share, budget = ideal(scn)

    def settle(role, t):
        if scn.metering_on_at_us <= t < scn.metering_on_at_us + scn.avg_window_us:
            return 40 if role == REGULAR else 45
        return share(role, t)

    assert evaluate_records(*fake_records(scn, settle, budget), CAP, scn).phase3_ok


def write_fake_isolation(out, scn=IsolationScenario()):
    share, budget = ideal(scn)
    recs, names = fake_records(scn, share, budget)
    v = evaluate_records(recs, names, CAP, scn)
    isolation.write_outputs(IsolationResult(scn, CAP, 10.0, names, recs, v), out)
    return v


def test_csv_round_trip_gives_same_verdict(tmp_path):
    v = write_fake_isolation(tmp_path)
    again = evaluate(tmp_path)
    assert again.passed == v.passed
    assert again.phase3_worst_dev_pp == pytest.approx(v.phase3_worst_dev_pp)
    header = (tmp_path / "usage.csv").read_text().splitlines()[0]
    assert header == "instance,window_index,t_ms,instructions_used,budget,suspended"


def test_calibration_missing():
    with pytest.raises(CalibrationMissing):
        run_isolation(IsolationScenario(), Runtime())
    with pytest.raises(CalibrationMissing):
        run_isolation(IsolationScenario(), None)


def test_insufficient_loops():
    scn = latency_scenario(10)
    stages = np.array([[0, 1, 1, 1, 1, 4, 5]], dtype=np.uint32)
    res = LoopResult(BenchArm.NATIVE, DappRun(0, stages, controls_sent=1), E3Agent(scn))
    with pytest.raises(InsufficientLoops):
        _arm_table([res], 10)
    res = LoopResult(BenchArm.NATIVE, DappRun(3, stages[:0]), E3Agent(scn))
    with pytest.raises(InsufficientLoops):
        _arm_table([res], 10)


def test_latency_small_run(tmp_path):
    rep = run_latency(loops=50, out_dir=tmp_path, seed=1)
    assert rep.passed, rep.predicates
    assert set(rep.predicates) == {"native_stage_sum", "sandbox_stage_sum", "sandbox_realtime", "native_not_slower"}
    table = np.genfromtxt(tmp_path / "latency_sandbox.csv", delimiter=",", names=True)
    assert table.dtype.names == COLUMNS and len(table) == 50
    assert (tmp_path / "latency_summary.csv").exists()


def test_reproducible_blocklists():
    scn = latency_scenario(40, seed=77)
    a = run_closed_loop(BenchArm.SANDBOXED, scn)
    b = run_closed_loop(BenchArm.SANDBOXED, scn)
    assert [c.action for c in a.agent.controls] == [c.action for c in b.agent.controls]


def test_footprint_records_and_ratios(tmp_path):
    rep = run_footprint(duration_us=300_000, out_dir=tmp_path)
    assert rep.passed, rep.predicates
    for r in rep.records.values():
        assert r.cpu_time_ms > 0 and r.peak_rss_bytes > 0 and r.loops == 300
    assert rep.memory_ratio > 1
    assert (tmp_path / "footprint.csv").read_text().startswith("arm,cpu_time_ms,peak_rss_bytes,loops")
    with pytest.raises(ValueError):
        FootprintRecord(BenchArm.NATIVE, -1.0, 0)


def test_footprint_ratio_none_with_one_arm():
    rep = FootprintReport({BenchArm.NATIVE: FootprintRecord(BenchArm.NATIVE, 5.0, 100)})
    assert rep.cpu_ratio is None and rep.passed


def test_report_needs_all_inputs(tmp_path):
    with pytest.raises(MissingInput):
        report(tmp_path / "absent")
    write_fake_isolation(tmp_path)
    with pytest.raises(MissingInput):
        report(tmp_path)


def snapshot(*roots):
    return {p: p.stat().st_mtime_ns for r in roots for p in Path(r).rglob("*")}


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "out"
    write_fake_isolation(out)
    before = snapshot(tmp_path, cache_dir())
    assert main(["latency", "--loops", "30", "--out", str(out)]) == 0
    assert main(["footprint", "--duration-s", "0.2", "--out", str(out)]) == 0
    code = main(["report", "--in", str(out)])
    text = capsys.readouterr().out
    assert code == 0, text
    assert "Overall: PASS" in text
    m = re.search(r"sandbox/native ratios  cpu (\S+)  memory (\S+)", text)
    assert m and all(re.fullmatch(r"\d+\.\d\d", g) for g in m.groups())
    for name in ("isolation_shares.dat", "footprint.dat", "latency_sandbox_cdf.dat", "summary.txt"):
        assert (out / name).exists()
    after = snapshot(tmp_path, cache_dir())
    # everything new lives under the output directory
    assert all(out in p.parents for p in set(after) - set(before))


def test_cli_isolation_short_scenario(tmp_path):
    scn = {"saturation_at_us": 300_000, "metering_on_at_us": 500_000, "total_us": 900_000}
    (tmp_path / "s.json").write_text(json.dumps(scn))
    out = tmp_path / "iso"
    code = main(["isolation", "--scenario", str(tmp_path / "s.json"), "--out", str(out), "--calibration-us", "300000"])
    # exit status is exactly the offline verdict recomputed from the CSV
    assert code == (0 if evaluate(out).passed else 1)
    assert evaluate(out).budget_bound_ok


def test_cli_seed_override_and_errors(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("BENCH_SEED", "5")
    assert latency_scenario(10).seed == 5
    assert main(["report", "--in", str(tmp_path)]) == 1
    assert "MissingInput" in capsys.readouterr().err
    assert main(["latency", "--arms", "gpu", "--out", str(tmp_path)]) == 1
    assert main(["footprint", "--repeats", "0", "--out", str(tmp_path)]) == 2


def test_console_script_installed(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dappbox.bench.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "isolation" in proc.stdout
