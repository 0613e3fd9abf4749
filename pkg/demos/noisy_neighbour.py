"""The three-phase isolation experiment: fair shares, a neighbour gone rogue, metering restored.

Writes usage.csv and shares.csv into ./noisy_neighbour_out and prints one line per 100 ms.
"""

from pathlib import Path

from dappbox.bench import isolation
from dappbox.host.runtime import Runtime

out = Path("noisy_neighbour_out")
rt = Runtime()
print("capacity:", rt.calibrate_capacity(1_000_000), "instructions per 10 ms window")
res = isolation.run_isolation(isolation.IsolationScenario(), rt, out)

for row in res.verdict.rows:
    bar = "#" * int(row.regular_pct / 2) + "+" * int(row.misbehaving_pct / 2)
    print(f"{row.t_ms:6.0f} ms  phase {row.phase}  {row.regular_pct:5.1f}% {row.misbehaving_pct:5.1f}%  {bar}")

v = res.verdict
print("phase1", v.phase1_ok, "phase2", v.phase2_ok, "phase3", v.phase3_ok, "budget bound", v.budget_bound_ok)
