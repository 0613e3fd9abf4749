"""Encode a few E3 messages, look at the bytes, and watch malformed input get rejected."""

import numpy as np

from dappbox import codec
from dappbox.codec import Control, Indication, IqFrame, PrbBlocklist, ServiceKind, SetupRequest

# A setup request asking for report and control services.
req = SetupRequest(dapp_id=1, services=codec.services_mask(ServiceKind.REPORT, ServiceKind.CONTROL))
wire = codec.encode(req)
print("SetupRequest ", wire.hex(" "))
assert codec.decode(wire) == req

# Controls carry a PRB bitmap; indices 3 and 40 out of 64.
ctl = Control(dapp_id=1, seq=17, action=PrbBlocklist.from_indices(64, [3, 40]))
wire = codec.encode(ctl)
print("Control      ", wire.hex(" "))
print("  blocked ->", sorted(codec.decode(wire).action.indices()))

# IQ frames ride inside indications as big-endian f32 I/Q pairs.
frame = IqFrame(np.exp(2j * np.pi * np.arange(8) / 8).astype(np.complex64))
ind = Indication(sub_id=1, seq=0, timestamp_us=1000, payload=frame)
print("Indication with 8 samples:", len(codec.encode(ind)), "bytes")
assert codec.decode(codec.encode(ind)) == ind

# Every malformed input maps onto a CodecError subclass, never a crash.
for bad in (b"", b"\x00\x01\x01", wire[:-1], wire + b"\x00"):
    try:
        codec.decode(bad)
    except codec.CodecError as exc:
        print(f"{bad.hex() or '<empty>':>30}: {type(exc).__name__}")
