"""Overlay framing for the gateway's single multiplexed link.

Every virtual point-to-point connection between the experimenter side and one
node shares its gateway's physical link; frames are tagged so the demux end
can route them. The layout is fixed and documented in docs/PROTOCOLS.md:

    frame := magic "OV1" . kind u8 . session_id[8] . seq u32_be
             . urn_len u16_be . urn utf8 . payload

kinds: 0 = downlink data, 1 = uplink data, 2 = status.
Header overhead is exactly 3 + 1 + 8 + 4 + 2 + len(urn) bytes.
"""

from __future__ import annotations

import struct

MAGIC = b"OV1"
KIND_DOWN = 0
KIND_UP = 1
KIND_STATUS = 2

_HEAD = struct.Struct(">B8sI H")  # kind, session id, seq, urn length


class OverlayFrameError(ValueError):
    pass


def header_overhead(urn: str) -> int:
    return len(MAGIC) + _HEAD.size + len(urn.encode())


def mux_frame(kind: int, session_id: str, seq: int, urn: str, payload: bytes) -> bytes:
    sid = bytes.fromhex(session_id)[:8].ljust(8, b"\x00")
    urn_bytes = urn.encode()
    return MAGIC + _HEAD.pack(kind, sid, seq, len(urn_bytes)) + urn_bytes + payload


def demux_frame(frame: bytes) -> tuple[int, str, int, str, bytes]:
    if frame[: len(MAGIC)] != MAGIC:
        raise OverlayFrameError("bad overlay magic")
    offset = len(MAGIC)
    if len(frame) < offset + _HEAD.size:
        raise OverlayFrameError("truncated overlay header")
    kind, sid, seq, urn_len = _HEAD.unpack_from(frame, offset)
    offset += _HEAD.size
    if len(frame) < offset + urn_len:
        raise OverlayFrameError("truncated overlay urn")
    urn = frame[offset : offset + urn_len].decode()
    payload = frame[offset + urn_len :]
    return kind, sid.hex(), seq, urn, payload
