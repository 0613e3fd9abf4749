"""E3-lite message model and wire format.

Frame layout (all integers big-endian, f32 as IEEE-754 big-endian)::

    frame := 0xE3 0x01 msg_type:u8 payload_len:u32 payload

    0x01 SetupRequest         dapp_id:u32 services:u8
    0x02 SetupResponse        dapp_id:u32 status:u8
    0x03 SubscriptionRequest  dapp_id:u32 service:u8 period_us:u32
    0x04 SubscriptionResponse sub_id:u32 status:u8
    0x05 Indication           sub_id:u32 seq:u32 timestamp_us:u64 payload_kind:u8
                              (kind 1: n_samples:u32 (i:f32 q:f32)^n)
    0x06 Control              dapp_id:u32 seq:u32 action:u8
                              (action 1: n_prb:u16 bitmap:bytes)
    0x07 ErrorIndication      code:u8

Blocklist bitmaps are LSB-first within each byte: bit ``i`` of the list is
``bitmap[i // 8] >> (i % 8) & 1``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

MAGIC = 0xE3
VERSION = 0x01
HEADER = struct.Struct(">BBBI")
HEADER_LEN = HEADER.size  # 7

STATUS_OK = 0
STATUS_REJECTED = 1

PAYLOAD_KIND_IQ = 1
ACTION_BLOCKLIST = 1

_U32 = 0xFFFFFFFF
_U64 = 0xFFFFFFFFFFFFFFFF


class MsgType(enum.IntEnum):
    SETUP_REQUEST = 0x01
    SETUP_RESPONSE = 0x02
    SUBSCRIPTION_REQUEST = 0x03
    SUBSCRIPTION_RESPONSE = 0x04
    INDICATION = 0x05
    CONTROL = 0x06
    ERROR_INDICATION = 0x07


class ServiceKind(enum.IntEnum):
    REPORT = 1
    INSERT = 2
    CONTROL = 3
    POLICY = 4
    QUERY = 5


class ErrorCode(enum.IntEnum):
    UNKNOWN_REQUEST = 1
    UNSUPPORTED = 2
    MISMATCHED_PRB_COUNT = 3


class CodecError(ValueError):
    """Base class for everything encode/decode can raise."""


class InvariantViolation(CodecError):
    pass


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class UnknownMsgType(CodecError):
    pass


class TruncatedPayload(CodecError):
    pass


class TrailingBytes(CodecError):
    pass


def services_mask(*kinds: ServiceKind) -> int:
    """Bit ``k-1`` set for each service kind ``k``."""
    mask = 0
    for k in kinds:
        mask |= 1 << (int(k) - 1)
    return mask


@dataclass(frozen=True)
class PrbBlocklist:
    n_prb: int
    bitmap: bytes

    @classmethod
    def from_indices(cls, n_prb: int, indices: Iterable[int]) -> "PrbBlocklist":
        buf = bytearray((n_prb + 7) // 8)
        for i in indices:
            if not 0 <= i < n_prb:
                raise InvariantViolation(f"PRB index {i} outside [0, {n_prb})")
            buf[i // 8] |= 1 << (i % 8)
        return cls(n_prb, bytes(buf))

    @classmethod
    def empty(cls, n_prb: int) -> "PrbBlocklist":
        return cls(n_prb, bytes((n_prb + 7) // 8))

    def indices(self) -> frozenset[int]:
        return frozenset(
            i for i in range(self.n_prb) if self.bitmap[i // 8] >> (i % 8) & 1
        )

    def is_blocked(self, prb: int) -> bool:
        return bool(self.bitmap[prb // 8] >> (prb % 8) & 1)

    def validate(self) -> None:
        if not 0 <= self.n_prb <= 0xFFFF:
            raise InvariantViolation(f"n_prb {self.n_prb} does not fit u16")
        if len(self.bitmap) != (self.n_prb + 7) // 8:
            raise InvariantViolation(
                f"bitmap has {len(self.bitmap)} bytes, n_prb={self.n_prb} needs "
                f"{(self.n_prb + 7) // 8}"
            )
        tail = self.n_prb % 8
        if tail and self.bitmap[-1] >> tail:
            raise InvariantViolation("bits at index >= n_prb must be zero")


class IqFrame:
    """A vector of complex baseband samples, stored as complex64.

    Equality is bitwise on the sample buffer so that frames survive a
    round trip through the wire format unchanged, NaN payloads included.
    """

    __slots__ = ("samples",)

    def __init__(self, samples) -> None:
        arr = np.ascontiguousarray(samples, dtype=np.complex64)
        if arr.ndim != 1:
            raise InvariantViolation("IqFrame samples must be one-dimensional")
        self.samples = arr

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IqFrame):
            return NotImplemented
        return self.samples.tobytes() == other.samples.tobytes()

    def __hash__(self) -> int:
        return hash(self.samples.tobytes())

    def __repr__(self) -> str:
        return f"IqFrame(n_samples={self.n_samples})"


@dataclass(frozen=True)
class SetupRequest:
    dapp_id: int
    services: int


@dataclass(frozen=True)
class SetupResponse:
    dapp_id: int
    status: int


@dataclass(frozen=True)
class SubscriptionRequest:
    dapp_id: int
    service: ServiceKind
    period_us: int


@dataclass(frozen=True)
class SubscriptionResponse:
    sub_id: int
    status: int


@dataclass(frozen=True)
class Indication:
    sub_id: int
    seq: int
    timestamp_us: int
    payload: IqFrame


@dataclass(frozen=True)
class Control:
    dapp_id: int
    seq: int
    action: PrbBlocklist


@dataclass(frozen=True)
class ErrorIndication:
    code: int


E3Message = Union[
    SetupRequest,
    SetupResponse,
    SubscriptionRequest,
    SubscriptionResponse,
    Indication,
    Control,
    ErrorIndication,
]

MESSAGE_TYPES: dict[type, MsgType] = {
    SetupRequest: MsgType.SETUP_REQUEST,
    SetupResponse: MsgType.SETUP_RESPONSE,
    SubscriptionRequest: MsgType.SUBSCRIPTION_REQUEST,
    SubscriptionResponse: MsgType.SUBSCRIPTION_RESPONSE,
    Indication: MsgType.INDICATION,
    Control: MsgType.CONTROL,
    ErrorIndication: MsgType.ERROR_INDICATION,
}


def _check_uint(name: str, value: int, mask: int) -> None:
    if not isinstance(value, (int, np.integer)) or not 0 <= value <= mask:
        raise InvariantViolation(f"{name}={value!r} out of range")


def _check_status(status: int) -> None:
    if status not in (STATUS_OK, STATUS_REJECTED):
        raise InvariantViolation(f"unknown status {status}")


def _check_service(service: int) -> None:
    if service not in ServiceKind._value2member_map_:
        raise InvariantViolation(f"unknown service {service}")


def _encode_payload(msg: E3Message) -> bytes:
    if isinstance(msg, SetupRequest):
        _check_uint("dapp_id", msg.dapp_id, _U32)
        _check_uint("services", msg.services, 0xFF)
        return struct.pack(">IB", msg.dapp_id, msg.services)
    if isinstance(msg, SetupResponse):
        _check_uint("dapp_id", msg.dapp_id, _U32)
        _check_status(msg.status)
        return struct.pack(">IB", msg.dapp_id, msg.status)
    if isinstance(msg, SubscriptionRequest):
        _check_uint("dapp_id", msg.dapp_id, _U32)
        _check_service(msg.service)
        _check_uint("period_us", msg.period_us, _U32)
        return struct.pack(">IBI", msg.dapp_id, int(msg.service), msg.period_us)
    if isinstance(msg, SubscriptionResponse):
        _check_uint("sub_id", msg.sub_id, _U32)
        _check_status(msg.status)
        return struct.pack(">IB", msg.sub_id, msg.status)
    if isinstance(msg, Indication):
        _check_uint("sub_id", msg.sub_id, _U32)
        _check_uint("seq", msg.seq, _U32)
        _check_uint("timestamp_us", msg.timestamp_us, _U64)
        frame = msg.payload
        if not isinstance(frame, IqFrame):
            raise InvariantViolation("Indication payload must be an IqFrame")
        _check_uint("n_samples", frame.n_samples, _U32)
        head = struct.pack(
            ">IIQBI", msg.sub_id, msg.seq, msg.timestamp_us, PAYLOAD_KIND_IQ,
            frame.n_samples,
        )
        return head + frame.samples.view(np.float32).astype(">f4").tobytes()
    if isinstance(msg, Control):
        _check_uint("dapp_id", msg.dapp_id, _U32)
        _check_uint("seq", msg.seq, _U32)
        if not isinstance(msg.action, PrbBlocklist):
            raise InvariantViolation("Control action must be a PrbBlocklist")
        msg.action.validate()
        return (
            struct.pack(">IIBH", msg.dapp_id, msg.seq, ACTION_BLOCKLIST, msg.action.n_prb)
            + bytes(msg.action.bitmap)
        )
    if isinstance(msg, ErrorIndication):
        _check_uint("code", msg.code, 0xFF)
        return struct.pack(">B", msg.code)
    raise InvariantViolation(f"not an E3 message: {type(msg).__name__}")


def encode(msg: E3Message) -> bytes:
    """Encode one message into a complete frame."""
    payload = _encode_payload(msg)
    return HEADER.pack(MAGIC, VERSION, MESSAGE_TYPES[type(msg)], len(payload)) + payload


def parse_header(header: bytes) -> tuple[MsgType, int]:
    """Validate a 7-byte frame header and return ``(msg_type, payload_len)``."""
    if not header:
        raise TruncatedPayload("empty input")
    if header[0] != MAGIC:
        raise BadMagic(f"expected 0xE3, got 0x{header[0]:02x}")
    if len(header) < 2:
        raise TruncatedPayload("header truncated before version byte")
    if header[1] != VERSION:
        raise UnsupportedVersion(f"version {header[1]}")
    if len(header) < 3:
        raise TruncatedPayload("header truncated before msg_type")
    if header[2] not in MsgType._value2member_map_:
        raise UnknownMsgType(f"msg_type 0x{header[2]:02x}")
    if len(header) < HEADER_LEN:
        raise TruncatedPayload("header truncated before payload_len")
    _, _, msg_type, payload_len = HEADER.unpack_from(header)
    return MsgType(msg_type), payload_len


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise TruncatedPayload(
                f"need {size} bytes at offset {self.pos}, payload has {len(self.buf)}"
            )
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(
                f"need {n} bytes at offset {self.pos}, payload has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise TrailingBytes(f"{len(self.buf) - self.pos} unread payload bytes")


def decode_payload(msg_type: MsgType, payload: bytes) -> E3Message:
    r = _Reader(payload)
    msg: E3Message
    if msg_type == MsgType.SETUP_REQUEST:
        dapp_id, services = r.take(">IB")
        msg = SetupRequest(dapp_id, services)
    elif msg_type == MsgType.SETUP_RESPONSE:
        dapp_id, status = r.take(">IB")
        _check_status(status)
        msg = SetupResponse(dapp_id, status)
    elif msg_type == MsgType.SUBSCRIPTION_REQUEST:
        dapp_id, service, period_us = r.take(">IBI")
        _check_service(service)
        msg = SubscriptionRequest(dapp_id, ServiceKind(service), period_us)
    elif msg_type == MsgType.SUBSCRIPTION_RESPONSE:
        sub_id, status = r.take(">IB")
        _check_status(status)
        msg = SubscriptionResponse(sub_id, status)
    elif msg_type == MsgType.INDICATION:
        sub_id, seq, ts, kind = r.take(">IIQB")
        if kind != PAYLOAD_KIND_IQ:
            raise InvariantViolation(f"unknown payload_kind {kind}")
        (n,) = r.take(">I")
        if n * 8 > len(payload) - r.pos:
            raise TruncatedPayload(f"{n} samples declared, {len(payload) - r.pos} bytes left")
        raw = np.frombuffer(r.raw(n * 8), dtype=">f4").astype(np.float32)
        msg = Indication(sub_id, seq, ts, IqFrame(raw.view(np.complex64)))
    elif msg_type == MsgType.CONTROL:
        dapp_id, seq, action = r.take(">IIB")
        if action != ACTION_BLOCKLIST:
            raise InvariantViolation(f"unknown control action {action}")
        (n_prb,) = r.take(">H")
        blocklist = PrbBlocklist(n_prb, r.raw((n_prb + 7) // 8))
        blocklist.validate()
        msg = Control(dapp_id, seq, blocklist)
    else:
        (code,) = r.take(">B")
        msg = ErrorIndication(code)
    r.finish()
    return msg


def decode(data: bytes) -> E3Message:
    """Decode exactly one frame. Raises a :class:`CodecError` subclass on any defect."""
    data = bytes(data)
    msg_type, payload_len = parse_header(data[:HEADER_LEN])
    body = data[HEADER_LEN:]
    if len(body) < payload_len:
        raise TruncatedPayload(f"payload_len={payload_len}, {len(body)} bytes follow")
    if len(body) > payload_len:
        raise TrailingBytes(f"{len(body) - payload_len} bytes after payload")
    return decode_payload(msg_type, body)


class FrameBuffer:
    """Reassembles frames from a byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[E3Message]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_LEN:
            msg_type, n = parse_header(bytes(self._buf[:HEADER_LEN]))
            if len(self._buf) < HEADER_LEN + n:
                break
            payload = bytes(self._buf[HEADER_LEN : HEADER_LEN + n])
            del self._buf[: HEADER_LEN + n]
            out.append(decode_payload(msg_type, payload))
        return out

    def __len__(self) -> int:
        return len(self._buf)
