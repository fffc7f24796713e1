"""Resource directory: publication (register/update/delete), lookup, and
standing subscriptions over resource descriptions.

Storage is an in-memory table with field indexes plus an append-only change
log for persistence; the observable contract (idempotent registration,
immutable role, soft-state visibility, deterministic lookup order) is what
matters, not the engine. Default lookups see only ACTIVE resources; a query
may widen or change its state filter explicitly.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from .geo import haversine_m
from .model import (
    MOBILE,
    NodeRole,
    NodeState,
    Position,
    ResourceDescription,
    Urn,
    ValidationError,
    parse_urn,
)


class NotFound(KeyError):
    pass


class Conflict(ValueError):
    pass


class BadQuery(ValueError):
    pass


_SIMPLE_FIELDS = {"role", "phenomenon", "state", "parent-gateway", "parent", "connection.type", "urn-prefix"}


@dataclass(frozen=True)
class Query:
    """Conjunction of key-value predicates plus an optional geo circle."""

    role: Optional[NodeRole] = None
    phenomenon: Optional[str] = None
    states: frozenset[NodeState] = frozenset({NodeState.ACTIVE})
    parent_gateway: Optional[Urn] = None
    connection_type: Optional[str] = None
    urn_prefix: Optional[str] = None
    meta: tuple[tuple[str, str], ...] = ()
    geo: Optional[tuple[float, float, float]] = None  # lat, lon, radius_m

    @classmethod
    def from_params(cls, params: dict[str, str]) -> "Query":
        """Build from string key-value pairs (HTTP query / CLI filters)."""
        role = None
        phenomenon = None
        states: frozenset[NodeState] = frozenset({NodeState.ACTIVE})
        parent = None
        conn = None
        prefix = None
        meta: list[tuple[str, str]] = []
        lat = lon = radius = None
        for key, value in params.items():
            if key == "role":
                try:
                    role = NodeRole(value)
                except ValueError:
                    raise BadQuery(f"unknown role {value!r}") from None
            elif key == "phenomenon":
                phenomenon = value
            elif key == "state":
                if value in ("*", "any"):
                    states = frozenset(NodeState)
                else:
                    try:
                        states = frozenset(
                            NodeState(v.strip()) for v in value.split(",") if v.strip()
                        )
                    except ValueError:
                        raise BadQuery(f"unknown state in {value!r}") from None
            elif key in ("parent-gateway", "parent"):
                try:
                    parent = parse_urn(value)
                except ValueError:
                    raise BadQuery(f"bad parent urn {value!r}") from None
            elif key in ("connection.type", "connection"):
                if value not in ("mesh", "gprs", "wired"):
                    raise BadQuery(f"unknown connection type {value!r}")
                conn = value
            elif key == "urn-prefix":
                prefix = value
            elif key.startswith("meta."):
                meta.append((key[len("meta.") :], value))
            elif key == "lat":
                lat = _number(key, value)
            elif key == "lon":
                lon = _number(key, value)
            elif key == "radius":
                radius = _number(key, value)
            else:
                raise BadQuery(f"unknown query field {key!r}")
        geo = None
        if lat is not None or lon is not None or radius is not None:
            if lat is None or lon is None or radius is None:
                raise BadQuery("geo queries need lat, lon and radius together")
            geo = (lat, lon, radius)
        return cls(
            role=role,
            phenomenon=phenomenon,
            states=states,
            parent_gateway=parent,
            connection_type=conn,
            urn_prefix=prefix,
            meta=tuple(meta),
            geo=geo,
        )

    def matches(self, desc: ResourceDescription) -> bool:
        if desc.state not in self.states:
            return False
        if self.role is not None and desc.role is not self.role:
            return False
        if self.phenomenon is not None and self.phenomenon not in desc.phenomena():
            return False
        if self.parent_gateway is not None and desc.parent_gateway != self.parent_gateway:
            return False
        if self.connection_type is not None and desc.connection.type.value != self.connection_type:
            return False
        if self.urn_prefix is not None and not desc.urn.render().startswith(self.urn_prefix):
            return False
        for key, value in self.meta:
            if desc.hw_meta.get(key) != value:
                return False
        if self.geo is not None:
            if not isinstance(desc.position, Position):
                return False  # mobile-tagged resources have no fixed location
            lat, lon, radius = self.geo
            if haversine_m(lat, lon, desc.position.lat, desc.position.lon) > radius:
                return False
        return True


def _number(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise BadQuery(f"{key} must be numeric, got {value!r}") from None


Notification = Callable[[str, Urn], None]  # (kind: appeared|disappeared, urn)


@dataclass
class StandingSubscription:
    sub_id: str
    query: Query
    notify: Notification
    endpoint: str = ""


class ResourceDirectory:
    """Store + RPI/RLI surfaces. Thread-safe; notifications dispatched via a
    pluggable ``dispatch`` so they stay off the write path."""

    def __init__(
        self,
        persist_path: Optional[str] = None,
        dispatch: Optional[Callable[[Callable[[], None]], None]] = None,
    ):
        self._lock = threading.RLock()
        self._docs: dict[Urn, ResourceDescription] = {}
        self._tombstones: list[ResourceDescription] = []
        self._subs: dict[str, StandingSubscription] = {}
        self._sub_seq = 0
        self._dispatch = dispatch or (lambda fn: fn())
        self._persist_path = persist_path
        self._log_fh = None
        if persist_path is not None:
            if os.path.exists(persist_path):
                self._replay(persist_path)
            os.makedirs(os.path.dirname(persist_path) or ".", exist_ok=True)
            self._log_fh = open(persist_path, "a", encoding="utf-8")

    # ------------------------------------------------------------------ RPI

    def register(self, desc: ResourceDescription) -> str:
        """Store a validated description; idempotent for identical re-POSTs."""
        desc.validate()
        with self._lock:
            existing = self._docs.get(desc.urn)
            if existing is not None and existing.state is not NodeState.DELETED:
                if existing == desc:
                    return self.uri_of(desc.urn)
                if existing.role is not desc.role:
                    raise Conflict(f"{desc.urn}: role is immutable ({existing.role.value})")
                merged = replace(desc, registered_at=existing.registered_at)
                self._put(merged, old=existing)
                return self.uri_of(desc.urn)
            if existing is not None:  # deleted: keep history, start a fresh record
                self._tombstones.append(existing)
                self._log({"op": "tombstone", "doc": existing.to_doc()})
            self._put(desc, old=None)
            return self.uri_of(desc.urn)

    def update(self, urn: Urn, partial: dict) -> None:
        """Merge mutable fields (state, position, last-seen, hw-meta...)."""
        with self._lock:
            existing = self._docs.get(urn)
            if existing is None:
                raise NotFound(str(urn))
            if "role" in partial and partial["role"] != existing.role.value:
                raise Conflict(f"{urn}: role is immutable")
            updated = existing
            if "state" in partial:
                updated = replace(updated, state=NodeState.parse(partial["state"]))
            if "position" in partial:
                pos = partial["position"]
                updated = replace(
                    updated,
                    position=MOBILE if pos == MOBILE else Position(float(pos["lat"]), float(pos["lon"])),
                )
            if "last-seen" in partial:
                updated = replace(updated, last_seen=int(partial["last-seen"]))
            if "hw-meta" in partial:
                meta = dict(updated.hw_meta)
                meta.update({str(k): str(v) for k, v in partial["hw-meta"].items()})
                updated = replace(updated, hw_meta=meta)
            if "capabilities" in partial:
                from .model import Capability

                updated = replace(
                    updated,
                    capabilities=tuple(Capability.from_doc(c) for c in partial["capabilities"]),
                )
            updated.validate()
            self._put(updated, old=existing)

    def delete(self, urn: Urn) -> None:
        """Soft delete: mark DELETED, keep the record out of default lookups."""
        with self._lock:
            existing = self._docs.get(urn)
            if existing is None:
                raise NotFound(str(urn))
            self._put(existing.with_state(NodeState.DELETED), old=existing)

    def rollback(self, urn: Urn) -> None:
        """Hard-remove a record (failed registration choreography)."""
        with self._lock:
            existing = self._docs.pop(urn, None)
            if existing is None:
                return
            self._log({"op": "remove", "urn": urn.render()})
            self._notify_delta(existing, None)

    # ------------------------------------------------------------------ RLI

    def lookup(self, query: Query) -> list[ResourceDescription]:
        with self._lock:
            candidates: Iterable[ResourceDescription] = self._docs.values()
            if NodeState.DELETED in query.states:
                candidates = list(candidates) + self._tombstones
            return sorted(
                (d for d in candidates if query.matches(d)), key=lambda d: d.urn.render()
            )

    def get(self, urn: Urn) -> ResourceDescription:
        with self._lock:
            doc = self._docs.get(urn)
            if doc is None:
                raise NotFound(str(urn))
            return doc

    def subscribe(self, query: Query, notify: Notification, endpoint: str = "") -> str:
        with self._lock:
            self._sub_seq += 1
            sub_id = f"rdsub-{self._sub_seq:04d}"
            self._subs[sub_id] = StandingSubscription(sub_id, query, notify, endpoint)
            return sub_id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            self._subs.pop(sub_id, None)

    # ------------------------------------------------------------ internals

    def uri_of(self, urn: Urn) -> str:
        return f"/resources/{urn.render()}"

    def count(self) -> int:
        with self._lock:
            return len(self._docs)

    def all_docs(self) -> list[ResourceDescription]:
        with self._lock:
            return sorted(self._docs.values(), key=lambda d: d.urn.render())

    def summary(self) -> dict:
        with self._lock:
            by_state: dict[str, int] = {}
            by_role: dict[str, int] = {}
            for doc in self._docs.values():
                by_state[doc.state.value] = by_state.get(doc.state.value, 0) + 1
                by_role[doc.role.value] = by_role.get(doc.role.value, 0) + 1
            return {"total": len(self._docs), "by-state": by_state, "by-role": by_role}

    def _put(self, desc: ResourceDescription, old: Optional[ResourceDescription]) -> None:
        self._docs[desc.urn] = desc
        self._log({"op": "put", "doc": desc.to_doc()})
        self._notify_delta(old, desc)

    def _notify_delta(
        self, old: Optional[ResourceDescription], new: Optional[ResourceDescription]
    ) -> None:
        urn = (new or old).urn  # type: ignore[union-attr]
        for sub in list(self._subs.values()):
            before = old is not None and sub.query.matches(old)
            after = new is not None and sub.query.matches(new)
            if after and not before:
                self._dispatch(lambda s=sub: s.notify("appeared", urn))
            elif before and not after:
                self._dispatch(lambda s=sub: s.notify("disappeared", urn))

    def _log(self, record: dict) -> None:
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_fh.flush()

    def _replay(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                op = record["op"]
                if op == "put":
                    doc = ResourceDescription.from_doc(record["doc"])
                    self._docs[doc.urn] = doc
                elif op == "remove":
                    self._docs.pop(parse_urn(record["urn"]), None)
                elif op == "tombstone":
                    self._tombstones.append(ResourceDescription.from_doc(record["doc"]))

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
