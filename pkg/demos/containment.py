"""What the sandbox refuses to run, and what happens to guests that misbehave at runtime."""

from dappbox.guests import guest_path
from dappbox.host.manifest import ModuleManifest
from dappbox.host.meter import GasBudget
from dappbox.host.runtime import ForbiddenImport, Runtime

rt = Runtime()

try:
    rt.load_module(ModuleManifest("forbidden", guest_path("forbidden")))
except ForbiddenImport as exc:
    print("load rejected, forbidden import:", exc.name)

trap = rt.load_module(ModuleManifest("trap", guest_path("trap")))
for entry in ("oob_store", "unreachable", "div_zero"):
    inst = rt.spawn_instance(trap).start(entry)
    inst.join(5)
    print(f"{entry:12s} -> {inst.state.value}")

# A guest with a small budget is parked at its limit each window instead of hogging the CPU.

spin = rt.load_module(ModuleManifest("load", guest_path("load")))
inst = rt.spawn_instance(spin, GasBudget(300_000)).start("saturate")
recs = list(rt.run_window_scheduler([inst], duration_us=100_000))
print("windows:", len(recs), "max used:", max(r.instructions_used for r in recs), "budget: 300000")
inst.kill()
inst.join(1)
