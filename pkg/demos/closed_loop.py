"""Run the sensing dApp against the E3 agent, once sandboxed and once native, and compare."""

import numpy as np

from dappbox import codec
from dappbox.agent import Incumbent, ScenarioConfig
from dappbox.dapp.runner import BenchArm, run_closed_loop

scn = ScenarioConfig(
    noise_sigma=ScenarioConfig.sigma_for_snr(1.0, 15.0),
    incumbents=(Incumbent(3, 1.0), Incumbent(40, 1.0, start_us=50_000)),
    indication_period_us=1000,
    duration_us=100_000,
    seed=3,
)

runs = {arm: run_closed_loop(arm, scn) for arm in (BenchArm.SANDBOXED, BenchArm.NATIVE)}
for arm, r in runs.items():
    rtt = np.array([rec.rtt_us for rec in r.agent.loop_records()])
    print(f"{arm.value:8s} exit={r.dapp.exit_code} controls={len(r.agent.controls)} "
          f"median rtt={np.median(rtt):.0f}us p99={np.percentile(rtt, 99):.0f}us")

# PRB 40 switches on halfway through; the blocklist follows it.
ctl = runs[BenchArm.SANDBOXED].agent.controls
print("frame 10 blocked:", sorted(ctl[10].action.indices()))
print("frame 90 blocked:", sorted(ctl[90].action.indices()))

same = [codec.encode(c) for c in ctl] == [codec.encode(c) for c in runs[BenchArm.NATIVE].agent.controls]
print("sandboxed and native Control streams bit-identical:", same)
