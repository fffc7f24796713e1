"""Domain model shared by every subsystem: URNs, node roles, the resource
lifecycle state machine, resource descriptions and observations, plus the
canonical JSON document encoding they travel in.

All types here are immutable values; ``transition`` is a pure function.
Timestamps throughout are simulated-time milliseconds (integers), never wall
clock, so runs are reproducible.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Optional


class MalformedUrn(ValueError):
    """Raised when a URN string does not match the documented scheme."""


class IllegalTransition(ValueError):
    """Raised for a (state, event) pair outside the lifecycle table."""


class ValidationError(ValueError):
    """A document violates one or more field invariants."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


_SEGMENT_RE = re.compile(r"^[a-z0-9][a-z0-9._-]*$")


@dataclass(frozen=True, order=True)
class Urn:
    """Resource name rendered as ``urn:<authority>:<testbed>:<node-id>``."""

    authority: str
    testbed: str
    node_id: str

    def render(self) -> str:
        return f"urn:{self.authority}:{self.testbed}:{self.node_id}"

    def __str__(self) -> str:
        return self.render()


def parse_urn(text: str) -> Urn:
    """Parse a URN string; ``render(parse_urn(s)) == s`` for valid input."""
    if not isinstance(text, str):
        raise MalformedUrn(f"urn must be a string, got {type(text).__name__}")
    parts = text.split(":")
    if len(parts) != 4:
        raise MalformedUrn(f"expected 4 colon-separated segments, got {len(parts)}: {text!r}")
    scheme, authority, testbed, node_id = parts
    if scheme != "urn":
        raise MalformedUrn(f"urn must start with 'urn:', got {text!r}")
    for name, seg in (("authority", authority), ("testbed", testbed), ("node-id", node_id)):
        if not seg:
            raise MalformedUrn(f"empty {name} segment in {text!r}")
        if not _SEGMENT_RE.match(seg):
            raise MalformedUrn(f"bad characters in {name} segment of {text!r}")
    return Urn(authority, testbed, node_id)


class NodeRole(str, Enum):
    INFRASTRUCTURAL = "infrastructural"
    EXPERIMENTATION = "experimentation"
    SERVICE_ONLY = "service-only"
    PARTICIPATORY = "participatory"

    @classmethod
    def parse(cls, text: str) -> "NodeRole":
        try:
            return cls(text)
        except ValueError:
            raise ValidationError([f"unknown role {text!r}"]) from None


class NodeState(str, Enum):
    NEW = "new"
    ACTIVE = "active"
    DISABLED = "disabled"
    DELETED = "deleted"

    @classmethod
    def parse(cls, text: str) -> "NodeState":
        try:
            return cls(text)
        except ValueError:
            raise ValidationError([f"unknown state {text!r}"]) from None


class LifecycleEvent(str, Enum):
    REG_OK = "reg-ok"
    INVALIDATION_TIMEOUT = "invalidation-timeout"
    DELETION_TIMEOUT = "deletion-timeout"
    FRESH_HELLO = "fresh-hello"


# The full legal-transition table. The failure path never skips DISABLED, and
# a DELETED resource re-registers as a fresh record (state NEW first).
_TRANSITIONS: dict[tuple[NodeState, LifecycleEvent], NodeState] = {
    (NodeState.NEW, LifecycleEvent.REG_OK): NodeState.ACTIVE,
    (NodeState.ACTIVE, LifecycleEvent.INVALIDATION_TIMEOUT): NodeState.DISABLED,
    (NodeState.DISABLED, LifecycleEvent.FRESH_HELLO): NodeState.ACTIVE,
    (NodeState.DISABLED, LifecycleEvent.DELETION_TIMEOUT): NodeState.DELETED,
    (NodeState.DELETED, LifecycleEvent.REG_OK): NodeState.NEW,
}


def transition(state: NodeState, event: LifecycleEvent) -> NodeState:
    """Next lifecycle state for ``event``, or IllegalTransition."""
    try:
        return _TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(f"no transition for ({state.value}, {event.value})") from None


class ConnectionType(str, Enum):
    MESH = "mesh"
    GPRS = "gprs"
    WIRED = "wired"


@dataclass(frozen=True)
class Capability:
    phenomenon: str
    unit: str
    accuracy: Optional[float] = None

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {"phenomenon": self.phenomenon, "unit": self.unit}
        if self.accuracy is not None:
            doc["accuracy"] = self.accuracy
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Capability":
        return cls(str(doc["phenomenon"]), str(doc["unit"]), doc.get("accuracy"))


@dataclass(frozen=True)
class Position:
    lat: float
    lon: float


#: Position tag for nodes whose location varies (vehicle-mounted).
MOBILE = "mobile"


@dataclass(frozen=True)
class Connection:
    address: str
    type: ConnectionType


@dataclass(frozen=True)
class ResourceDescription:
    """Canonical description of one testbed resource."""

    urn: Urn
    role: NodeRole
    capabilities: tuple[Capability, ...]
    position: Position | str  # Position or the MOBILE tag
    connection: Connection
    state: NodeState
    parent_gateway: Optional[Urn] = None
    hw_meta: Mapping[str, str] = field(default_factory=dict)
    registered_at: int = 0
    last_seen: int = 0

    def violations(self) -> list[str]:
        out: list[str] = []
        if self.role in (NodeRole.EXPERIMENTATION, NodeRole.SERVICE_ONLY) and not self.capabilities:
            out.append(f"{self.urn}: capabilities required for role {self.role.value}")
        if self.connection.type is ConnectionType.MESH and self.parent_gateway is None:
            out.append(f"{self.urn}: mesh connection requires parent-gateway")
        if self.connection.type is not ConnectionType.MESH and self.parent_gateway is not None:
            out.append(f"{self.urn}: parent-gateway only valid for mesh connection")
        if self.role is NodeRole.PARTICIPATORY and self.parent_gateway is not None:
            out.append(f"{self.urn}: participatory nodes have no gateway parent")
        if self.last_seen < self.registered_at:
            out.append(f"{self.urn}: last-seen precedes registered-at")
        if self.position != MOBILE and not isinstance(self.position, Position):
            out.append(f"{self.urn}: position must be lat/lon or the mobile tag")
        return out

    def validate(self) -> "ResourceDescription":
        errs = self.violations()
        if errs:
            raise ValidationError(errs)
        return self

    def phenomena(self) -> set[str]:
        return {c.phenomenon for c in self.capabilities}

    def with_state(self, state: NodeState) -> "ResourceDescription":
        return replace(self, state=state)

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {
            "urn": self.urn.render(),
            "role": self.role.value,
            "capabilities": [c.to_doc() for c in self.capabilities],
            "position": (
                MOBILE
                if self.position == MOBILE
                else {"lat": self.position.lat, "lon": self.position.lon}
            ),
            "connection": {"address": self.connection.address, "type": self.connection.type.value},
            "state": self.state.value,
            "hw-meta": dict(self.hw_meta),
            "registered-at": self.registered_at,
            "last-seen": self.last_seen,
        }
        if self.parent_gateway is not None:
            doc["parent-gateway"] = self.parent_gateway.render()
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ResourceDescription":
        try:
            pos_doc = doc["position"]
            position: Position | str
            if pos_doc == MOBILE:
                position = MOBILE
            else:
                position = Position(float(pos_doc["lat"]), float(pos_doc["lon"]))
            conn = doc["connection"]
            parent = doc.get("parent-gateway")
            return cls(
                urn=parse_urn(doc["urn"]),
                role=NodeRole.parse(doc["role"]),
                capabilities=tuple(Capability.from_doc(c) for c in doc.get("capabilities", [])),
                position=position,
                connection=Connection(str(conn["address"]), ConnectionType(conn["type"])),
                state=NodeState.parse(doc["state"]),
                parent_gateway=parse_urn(parent) if parent else None,
                hw_meta={str(k): str(v) for k, v in doc.get("hw-meta", {}).items()},
                registered_at=int(doc.get("registered-at", 0)),
                last_seen=int(doc.get("last-seen", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError([f"bad description document: {exc}"]) from None


@dataclass(frozen=True)
class Observation:
    """One sensor reading, tagged with the plane that produced it."""

    source: Urn
    phenomenon: str
    value: float
    unit: str
    position: Position
    timestamp: int
    speed: Optional[float] = None
    course: Optional[float] = None
    plane: str = "management"

    def violations(self, source_desc: Optional[ResourceDescription] = None) -> list[str]:
        out: list[str] = []
        if source_desc is not None:
            if self.phenomenon not in source_desc.phenomena():
                out.append(
                    f"{self.source}: phenomenon {self.phenomenon!r} not in source capabilities"
                )
            if source_desc.position == MOBILE and (self.speed is None or self.course is None):
                out.append(f"{self.source}: mobile observations must carry speed and course")
        return out

    def to_doc(self) -> dict:
        doc: dict[str, Any] = {
            "source": self.source.render(),
            "phenomenon": self.phenomenon,
            "value": self.value,
            "unit": self.unit,
            "position": {"lat": self.position.lat, "lon": self.position.lon},
            "timestamp": self.timestamp,
            "plane": self.plane,
        }
        if self.speed is not None:
            doc["speed"] = self.speed
        if self.course is not None:
            doc["course"] = self.course
        return doc

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Observation":
        pos = doc["position"]
        return cls(
            source=parse_urn(doc["source"]),
            phenomenon=str(doc["phenomenon"]),
            value=float(doc["value"]),
            unit=str(doc["unit"]),
            position=Position(float(pos["lat"]), float(pos["lon"])),
            timestamp=int(doc["timestamp"]),
            speed=doc.get("speed"),
            course=doc.get("course"),
            plane=str(doc.get("plane", "management")),
        )


def canonical_json(doc: Any) -> str:
    """Canonical rendering used everywhere a document crosses a boundary."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def description_to_json(desc: ResourceDescription) -> str:
    return canonical_json(desc.to_doc())


def description_from_json(text: str) -> ResourceDescription:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([f"not valid JSON: {exc}"]) from None
    return ResourceDescription.from_doc(doc)


def observation_to_json(obs: Observation) -> str:
    return canonical_json(obs.to_doc())


def observation_from_json(text: str) -> Observation:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([f"not valid JSON: {exc}"]) from None
    return Observation.from_doc(doc)
