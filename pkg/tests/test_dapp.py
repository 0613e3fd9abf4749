import threading

import numpy as np
import pytest

from dappbox import codec
from dappbox.agent import E3Agent, Incumbent, ScenarioConfig, gen_iq_frame
from dappbox.codec import Indication, IqFrame, SetupRequest
from dappbox.dapp.runner import (
    EXIT_CONNECT,
    EXIT_OK,
    EXIT_REJECTED,
    STAGE_FIELDS,
    BenchArm,
    collect_sandboxed,
    native_dapp,
    run_closed_loop,
    start_sandboxed,
)
from dappbox.dapp.sensing import SensingConfig, sense
from dappbox.host.manifest import ModuleManifest
from dappbox.host.runtime import Runtime
from dappbox.guests import dapp_wasm
from dappbox.net import VirtualNetwork

ARMS = [BenchArm.NATIVE, BenchArm.SANDBOXED]


def two_incumbents(n_frames=100, seed=3, snr_db=20.0):
    sigma = ScenarioConfig.sigma_for_snr(1.0, snr_db)
    return ScenarioConfig(
        noise_sigma=sigma, incumbents=(Incumbent(3, 1.0), Incumbent(40, 1.0)),
        indication_period_us=1000, duration_us=n_frames * 1000, seed=seed,
    )


def test_arm_parsing():
    assert BenchArm.parse("wasm") is BenchArm.SANDBOXED
    assert BenchArm.parse(" Native ") is BenchArm.NATIVE
    with pytest.raises(ValueError):
        BenchArm.parse("gpu")


def test_config_rendering():
    text = SensingConfig(listen_port=5).to_keyvalue()
    assert "fft_size=1024\n" in text and "listen_port=5\n" in text
    assert "listen_port" not in SensingConfig().to_keyvalue()


@pytest.mark.parametrize("arm", ARMS)
def test_hundred_frames(arm):
    res = run_closed_loop(arm, two_incumbents())
    assert res.dapp.exit_code == EXIT_OK, res.dapp.trap
    assert res.dapp.controls_sent == 100
    assert [c.seq for c in res.agent.controls] == list(range(100))
    assert [r.seq for r in res.agent.loop_records()] == list(range(100))
    assert res.agent.scheduler.blocked() == {3, 40}
    st = res.dapp.stages
    assert st.shape == (100, len(STAGE_FIELDS))
    stage_sum = st[:, 1:5].astype(np.int64).sum(axis=1)
    assert np.all(np.abs(stage_sum - res.dapp.column("cumulative_us")) <= 1)
    assert np.all(res.dapp.column("cumulative_us") <= res.dapp.column("loop_us") + 1)


@pytest.mark.parametrize("arm", ARMS)
def test_detection_matches_reference(arm):
    scn = two_incumbents(n_frames=30, seed=8, snr_db=8.0)
    res = run_closed_loop(arm, scn)
    ref = [sense(gen_iq_frame(scn, c.seq * 1000), SensingConfig()) for c in res.agent.controls]
    assert [c.action.indices() for c in res.agent.controls] == ref


def test_build_parity():
    scn = two_incumbents(seed=1234, snr_db=10.0)
    payloads = {}
    for arm in ARMS:
        res = run_closed_loop(arm, scn)
        assert res.dapp.ok
        payloads[arm] = [codec.encode(c) for c in res.agent.controls]
    assert len(payloads[BenchArm.NATIVE]) == 100
    assert payloads[BenchArm.NATIVE] == payloads[BenchArm.SANDBOXED]


@pytest.mark.parametrize("arm", ARMS)
def test_server_mode(arm):
    cfg = SensingConfig(listen_port=7100, agent_endpoint=("agent", 9990))
    res = run_closed_loop(arm, two_incumbents(n_frames=20), cfg=cfg)
    assert res.dapp.ok and res.dapp.controls_sent == 20


def test_setup_rejected_exits_2():
    net = VirtualNetwork()
    agent = E3Agent(two_incumbents(10))
    agent.handle_message(SetupRequest(1, 1))  # dapp_id 1 already taken
    agent.listen(net, "agent", 9990)
    agent.start(exit_when_done=False)
    cfg = SensingConfig(agent_endpoint=("agent", 9990))
    for arm in ARMS:
        if arm is BenchArm.NATIVE:
            run = native_dapp().run(net, cfg)
        else:
            run = collect_sandboxed(start_sandboxed(Runtime(net), cfg), 30)
        assert run.exit_code == EXIT_REJECTED
    agent.stop()


def test_endpoint_not_in_manifest_exits_3():
    net = VirtualNetwork()
    agent = E3Agent(two_incumbents(10))
    agent.listen(net, "agent", 9990)
    agent.start(exit_when_done=False)
    rt = Runtime(net)
    cfg = SensingConfig(agent_endpoint=("agent", 9990))
    module = rt.load_module(ModuleManifest("no-net", dapp_wasm(), [("elsewhere", 1)]))
    run = collect_sandboxed(start_sandboxed(rt, cfg, module=module), 30)
    assert run.exit_code == EXIT_CONNECT
    inst = rt.instances[max(rt.instances)]
    assert inst.sockets.opened == []
    agent.stop()


@pytest.mark.parametrize("arm", ARMS)
def test_nothing_listening_exits_3(arm):
    net = VirtualNetwork()
    cfg = SensingConfig(agent_endpoint=("agent", 9990))
    if arm is BenchArm.NATIVE:
        run = native_dapp().run(net, cfg)
    else:
        run = collect_sandboxed(start_sandboxed(Runtime(net), cfg), 30)
    assert run.exit_code == EXIT_CONNECT


def scripted_agent(net, frames):
    """Accept one dApp, answer setup/subscribe, send ``frames`` as indications, then hang up."""
    lst = net.listen("agent", 9990)
    got = []

    def serve():
        s = lst.accept(10)
        fb = codec.FrameBuffer()
        replies = [codec.SetupResponse(1, codec.STATUS_OK), codec.SubscriptionResponse(1, codec.STATUS_OK)]
        while replies:
            for _ in fb.feed(s.recv(4096)):
                s.sendall(codec.encode(replies.pop(0)))
        for seq, frame in enumerate(frames):
            s.sendall(codec.encode(Indication(1, seq, seq * 1000, frame)))
        s.settimeout(1.0)
        try:
            while len(got) < len(frames):
                data = s.recv(4096)
                if not data:
                    break
                got.extend(fb.feed(data))
        except OSError:
            pass
        s.close()
        lst.close()

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    return t, got


@pytest.mark.parametrize("arm", ARMS)
def test_zero_sample_frame_counted_not_answered(arm):
    net = VirtualNetwork()
    good = gen_iq_frame(two_incumbents(), 0)
    t, got = scripted_agent(net, [IqFrame(np.zeros(0, np.complex64)), good])
    cfg = SensingConfig(agent_endpoint=("agent", 9990))
    if arm is BenchArm.NATIVE:
        run = native_dapp().run(net, cfg)
    else:
        run = collect_sandboxed(start_sandboxed(Runtime(net), cfg), 30)
    t.join(10)
    assert run.exit_code == EXIT_OK
    assert run.decode_errors == 1
    assert run.controls_sent == 1
    assert [m.seq for m in got] == [1]
