import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=100
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def runtime():
    from dappbox.host.runtime import Runtime

    rt = Runtime()
    yield rt
    for inst in list(rt.instances.values()):
        inst.kill()
    for inst in list(rt.instances.values()):
        inst.join(5)


def steal_ticks() -> int:
    """Hypervisor steal so far, in USER_HZ ticks (0 where /proc/stat is unavailable)."""
    try:
        with open("/proc/stat") as f:
            fields = f.readline().split()
        return int(fields[8])
    except (OSError, IndexError, ValueError):
        return 0
