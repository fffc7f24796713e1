"""Simulated node programs.

Flashing a node swaps which of these runs on it. Each behavior sees downlink
experiment payloads and may emit uplink output; output travels the
experimentation plane back to the owning session. Every behavior announces a
boot banner when (re)started so resets are observable in the trace.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Protocol

Emit = Callable[[bytes], None]


class Behavior(Protocol):
    name: str

    def on_boot(self, version: int, emit: Emit) -> None: ...

    def on_payload(self, payload: bytes, emit: Emit) -> None: ...


class _Base:
    name = "base"

    def on_boot(self, version: int, emit: Emit) -> None:
        emit(f"boot:{self.name}:v{version}".encode())

    def on_payload(self, payload: bytes, emit: Emit) -> None:
        pass


class DefaultSense(_Base):
    """Factory image: periodic sensing only, ignores experiment payloads."""

    name = "default-sense"


class Echo(_Base):
    name = "echo"

    def on_payload(self, payload: bytes, emit: Emit) -> None:
        emit(payload)


class Blink(_Base):
    name = "blink"

    def __init__(self) -> None:
        self.led = False

    def on_payload(self, payload: bytes, emit: Emit) -> None:
        self.led = not self.led
        emit(b"blink:on" if self.led else b"blink:off")


class FloodRouting(_Base):
    """Acknowledges each payload once; duplicates (radio floods) are ignored."""

    name = "flood-routing"

    def __init__(self) -> None:
        self.seen: set[bytes] = set()

    def on_payload(self, payload: bytes, emit: Emit) -> None:
        digest = hashlib.md5(payload).digest()
        if digest in self.seen:
            return
        self.seen.add(digest)
        emit(b"flood:" + payload)


BEHAVIORS: dict[str, type] = {
    DefaultSense.name: DefaultSense,
    Echo.name: Echo,
    Blink.name: Blink,
    FloodRouting.name: FloodRouting,
}


def make_behavior(name: str) -> Behavior:
    try:
        return BEHAVIORS[name]()
    except KeyError:
        raise ValueError(f"unknown behavior {name!r}") from None
