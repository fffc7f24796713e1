"""Management events and their binary wire encoding.

Every management-plane interaction is a typed event on one of six topics:
three channels (registration, monitoring, reconfiguration), each with a
request topic and a reply topic. The event type string alone determines the
topic, so a frame is routable without any out-of-band header.

Wire format (documented bit-exactly in docs/PROTOCOLS.md):

    frame      := u32_be length . body          (length = len(body))
    body       := u16_be type_len . type_utf8 . corr_id[16] . u64_be published_at . payload
    payload    := field*
    field      := u16_be tag . u8 kind . value
    value      := u64_be            (kind 0)
                | i64_be            (kind 1)
                | f64_be            (kind 2)
                | u32_be n . bytes  (kind 3)
                | u32_be n . utf8   (kind 4)
                | u8                (kind 5, bool)

Unknown tags are preserved in order, so decode -> encode is byte-identical
even for frames produced by a newer peer.
"""

from __future__ import annotations

import struct
import uuid
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Iterable, Optional, Union


class DecodeError(ValueError):
    """Frame is truncated, malformed, or of an unregistered type."""


class UnknownEventType(DecodeError):
    pass


class TopicMismatch(ValueError):
    """Event published to a topic its type is not registered for."""


class Channel(str, Enum):
    REGISTRATION = "registration"
    MONITORING = "monitoring"
    RECONFIGURATION = "reconfiguration"


class Kind(str, Enum):
    REQUEST = "request"
    REPLY = "reply"


@dataclass(frozen=True, order=True)
class Topic:
    channel: Channel
    kind: Kind

    def __str__(self) -> str:
        return f"{self.channel.value}.{self.kind.value}"

    @classmethod
    def parse(cls, text: str) -> "Topic":
        try:
            channel, kind = text.split(".")
            return cls(Channel(channel), Kind(kind))
        except ValueError:
            raise ValueError(f"bad topic {text!r}") from None


ALL_TOPICS: tuple[Topic, ...] = tuple(
    Topic(ch, k) for ch in Channel for k in (Kind.REQUEST, Kind.REPLY)
)


# kind codes on the wire
KIND_U64 = 0
KIND_I64 = 1
KIND_F64 = 2
KIND_BYTES = 3
KIND_STR = 4
KIND_BOOL = 5

FieldValue = Union[int, float, bytes, str, bool]


@dataclass(frozen=True)
class PayloadField:
    tag: int
    kind: int
    value: FieldValue


@dataclass(frozen=True)
class ManagementEvent:
    event_type: str
    correlation_id: bytes  # exactly 16 bytes
    published_at: int  # simulated ms
    fields: tuple[PayloadField, ...] = ()

    def get(self, tag: int, default: Optional[FieldValue] = None) -> Optional[FieldValue]:
        for f in self.fields:
            if f.tag == tag:
                return f.value
        return default

    def get_all(self, tag: int) -> list[FieldValue]:
        return [f.value for f in self.fields if f.tag == tag]

    @property
    def topic(self) -> Topic:
        return event_topic(self.event_type)

    def identity(self) -> tuple[str, bytes]:
        """Dedup key: one logical event per (type, correlation id)."""
        return (self.event_type, self.correlation_id)


# --------------------------------------------------------------------------
# Event registry: type -> topic. Publishing to any other topic is rejected.
# --------------------------------------------------------------------------

_REG_REQ = Topic(Channel.REGISTRATION, Kind.REQUEST)
_REG_REP = Topic(Channel.REGISTRATION, Kind.REPLY)
_MON_REQ = Topic(Channel.MONITORING, Kind.REQUEST)
_MON_REP = Topic(Channel.MONITORING, Kind.REPLY)
_CFG_REQ = Topic(Channel.RECONFIGURATION, Kind.REQUEST)
_CFG_REP = Topic(Channel.RECONFIGURATION, Kind.REPLY)

EVENT_REGISTRY: dict[str, Topic] = {
    # registration channel
    "NODE_REG_REQUEST": _REG_REQ,
    "GW_REG_REQUEST": _REG_REQ,
    "PS_REG_REQUEST": _REG_REQ,
    "NODE_REG_REPLY": _REG_REP,
    "GW_REG_REPLY": _REG_REP,
    "PS_REG_REPLY": _REG_REP,
    # monitoring channel
    "HELLO": _MON_REQ,
    "NODE_STATUS_REQUEST": _MON_REQ,
    "NODE_INVALIDATION_REQUEST": _MON_REQ,
    "MONITOR_ACK": _MON_REP,
    # reconfiguration channel
    "ADD_SENSOR_REQ": _CFG_REQ,
    "ADD_GW_REQ": _CFG_REQ,
    "ADD_PS_REQ": _CFG_REQ,
    "ADD_SERVICE_REQ": _CFG_REQ,
    "REMOVE_SENSOR_REQ": _CFG_REQ,
    "REMOVE_GW_REQ": _CFG_REQ,
    "REMOVE_PS_REQ": _CFG_REQ,
    "REMOVE_SERVICE_REQ": _CFG_REQ,
    "ADD_SENSOR_REP": _CFG_REP,
    "ADD_GW_REP": _CFG_REP,
    "ADD_PS_REP": _CFG_REP,
    "ADD_SERVICE_REP": _CFG_REP,
    "REMOVE_SENSOR_REP": _CFG_REP,
    "REMOVE_GW_REP": _CFG_REP,
    "REMOVE_PS_REP": _CFG_REP,
    "REMOVE_SERVICE_REP": _CFG_REP,
}

# Control frames for the TCP bus protocol share the codec but are never
# published to a topic; they live under a reserved "_" prefix.
CONTROL_TYPES = {"_SUBSCRIBE", "_UNSUBSCRIBE", "_ACK", "_EVENT", "_OK", "_ERR"}


def event_topic(event_type: str) -> Topic:
    try:
        return EVENT_REGISTRY[event_type]
    except KeyError:
        raise UnknownEventType(f"unregistered event type {event_type!r}") from None


# Well-known payload tags; kept flat and small. Complex values (resource
# descriptions, observations) ride as canonical JSON in a single field.
TAG_URN = 1
TAG_DESCRIPTION = 2  # canonical JSON document
TAG_OUTCOME = 3  # bool: request succeeded
TAG_CAUSE = 4  # str: failure cause for outcome=false
TAG_RESOURCE_URI = 5
TAG_GATEWAY = 6
TAG_MEMBER_COUNT = 7
TAG_ALIVE = 8
TAG_BATTERY = 9
TAG_FREE_MEMORY = 10
TAG_CPU_LOAD = 11
TAG_ACKED_TYPE = 12  # str: event type a MONITOR_ACK acknowledges


def new_correlation_id() -> bytes:
    return uuid.uuid4().bytes


def make_event(
    event_type: str,
    published_at: int,
    fields: Iterable[PayloadField] = (),
    correlation_id: Optional[bytes] = None,
) -> ManagementEvent:
    if event_type not in EVENT_REGISTRY and event_type not in CONTROL_TYPES:
        raise UnknownEventType(f"unregistered event type {event_type!r}")
    cid = correlation_id if correlation_id is not None else new_correlation_id()
    if len(cid) != 16:
        raise ValueError("correlation id must be 16 bytes")
    return ManagementEvent(event_type, cid, published_at, tuple(fields))


def u64(tag: int, value: int) -> PayloadField:
    return PayloadField(tag, KIND_U64, int(value))


def i64(tag: int, value: int) -> PayloadField:
    return PayloadField(tag, KIND_I64, int(value))


def f64(tag: int, value: float) -> PayloadField:
    return PayloadField(tag, KIND_F64, float(value))


def raw(tag: int, value: bytes) -> PayloadField:
    return PayloadField(tag, KIND_BYTES, bytes(value))


def text(tag: int, value: str) -> PayloadField:
    return PayloadField(tag, KIND_STR, str(value))


def flag(tag: int, value: bool) -> PayloadField:
    return PayloadField(tag, KIND_BOOL, bool(value))


# --------------------------------------------------------------------------
# Codec
# --------------------------------------------------------------------------

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")


def _encode_field(f: PayloadField) -> bytes:
    head = _U16.pack(f.tag) + bytes([f.kind])
    if f.kind == KIND_U64:
        return head + _U64.pack(int(f.value))
    if f.kind == KIND_I64:
        return head + _I64.pack(int(f.value))
    if f.kind == KIND_F64:
        return head + _F64.pack(float(f.value))
    if f.kind == KIND_BYTES:
        data = bytes(f.value)  # type: ignore[arg-type]
        return head + _U32.pack(len(data)) + data
    if f.kind == KIND_STR:
        data = str(f.value).encode("utf-8")
        return head + _U32.pack(len(data)) + data
    if f.kind == KIND_BOOL:
        return head + (b"\x01" if f.value else b"\x00")
    raise ValueError(f"unknown field kind {f.kind}")


def encode_event(event: ManagementEvent) -> bytes:
    """Encode to the framed wire format (length prefix included)."""
    type_bytes = event.event_type.encode("utf-8")
    if len(type_bytes) > 0xFFFF:
        raise ValueError("event type too long")
    if len(event.correlation_id) != 16:
        raise ValueError("correlation id must be 16 bytes")
    body = bytearray()
    body += _U16.pack(len(type_bytes))
    body += type_bytes
    body += event.correlation_id
    body += _U64.pack(event.published_at)
    for f in event.fields:
        body += _encode_field(f)
    return _U32.pack(len(body)) + bytes(body)


def _need(buf: bytes, offset: int, n: int) -> None:
    if offset + n > len(buf):
        raise DecodeError(f"truncated frame: need {n} bytes at offset {offset}")


def _decode_fields(buf: bytes, offset: int) -> tuple[PayloadField, ...]:
    fields: list[PayloadField] = []
    while offset < len(buf):
        _need(buf, offset, 3)
        tag = _U16.unpack_from(buf, offset)[0]
        kind = buf[offset + 2]
        offset += 3
        value: FieldValue
        if kind == KIND_U64:
            _need(buf, offset, 8)
            value = _U64.unpack_from(buf, offset)[0]
            offset += 8
        elif kind == KIND_I64:
            _need(buf, offset, 8)
            value = _I64.unpack_from(buf, offset)[0]
            offset += 8
        elif kind == KIND_F64:
            _need(buf, offset, 8)
            value = _F64.unpack_from(buf, offset)[0]
            offset += 8
        elif kind in (KIND_BYTES, KIND_STR):
            _need(buf, offset, 4)
            n = _U32.unpack_from(buf, offset)[0]
            offset += 4
            _need(buf, offset, n)
            data = buf[offset : offset + n]
            offset += n
            if kind == KIND_STR:
                try:
                    value = data.decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise DecodeError(f"bad utf-8 in string field {tag}: {exc}") from None
            else:
                value = bytes(data)
        elif kind == KIND_BOOL:
            _need(buf, offset, 1)
            value = buf[offset] != 0
            offset += 1
        else:
            raise DecodeError(f"unknown field kind {kind} for tag {tag}")
        fields.append(PayloadField(tag, kind, value))
    return tuple(fields)


def decode_event(frame: bytes, *, registered_only: bool = True) -> ManagementEvent:
    """Decode one framed event; inverse of encode_event."""
    _need(frame, 0, 4)
    length = _U32.unpack(frame[:4])[0]
    if len(frame) != 4 + length:
        raise DecodeError(f"frame length mismatch: header says {length}, got {len(frame) - 4}")
    body = frame[4:]
    _need(body, 0, 2)
    type_len = _U16.unpack_from(body, 0)[0]
    _need(body, 2, type_len)
    try:
        event_type = body[2 : 2 + type_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"bad utf-8 in event type: {exc}") from None
    offset = 2 + type_len
    if not event_type:
        raise DecodeError("typeless frame: empty event type")
    if registered_only and event_type not in EVENT_REGISTRY and event_type not in CONTROL_TYPES:
        raise UnknownEventType(f"unregistered event type {event_type!r}")
    _need(body, offset, 16 + 8)
    correlation_id = bytes(body[offset : offset + 16])
    offset += 16
    published_at = _U64.unpack_from(body, offset)[0]
    offset += 8
    fields = _decode_fields(body, offset)
    return ManagementEvent(event_type, correlation_id, published_at, fields)


def read_frame(buf: bytes, offset: int) -> tuple[Optional[bytes], int]:
    """Extract one complete frame from a byte stream, if present.

    Returns (frame_bytes_or_None, new_offset); frame bytes include the
    length prefix so they feed straight into decode_event.
    """
    if len(buf) - offset < 4:
        return None, offset
    length = _U32.unpack_from(buf, offset)[0]
    if len(buf) - offset < 4 + length:
        return None, offset
    end = offset + 4 + length
    return bytes(buf[offset:end]), end
