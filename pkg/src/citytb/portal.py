"""Portal-side resource manager and the two reconfiguration consumers.

The resource manager serializes everything through the kernel: registration
requests run the full choreography (checks, directory publication, one
reconfiguration leg per concerned subsystem, then — only then — the reply),
monitoring events feed the soft-state timers, and timer expiry walks
resources down the disable/delete lifecycle, cascading gateway failures over
their cluster members. Every state transition lands in a structured audit
log.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Protocol

from .bus.events import (
    Channel,
    Kind,
    ManagementEvent,
    TAG_ACKED_TYPE,
    TAG_ALIVE,
    TAG_BATTERY,
    TAG_CAUSE,
    TAG_DESCRIPTION,
    TAG_FREE_MEMORY,
    TAG_GATEWAY,
    TAG_OUTCOME,
    TAG_RESOURCE_URI,
    TAG_URN,
    Topic,
    flag,
    make_event,
    text,
)
from .config import TestbedConfig
from .directory import Conflict, NotFound, ResourceDirectory
from .kernel import Kernel, Timer
from .model import (
    NodeRole,
    NodeState,
    ResourceDescription,
    Urn,
    ValidationError,
    description_from_json,
    parse_urn,
)
from .ports import BusPort

log = logging.getLogger(__name__)

REG_REQ = Topic(Channel.REGISTRATION, Kind.REQUEST)
REG_REP = Topic(Channel.REGISTRATION, Kind.REPLY)
MON_REQ = Topic(Channel.MONITORING, Kind.REQUEST)
MON_REP = Topic(Channel.MONITORING, Kind.REPLY)
CFG_REQ = Topic(Channel.RECONFIGURATION, Kind.REQUEST)
CFG_REP = Topic(Channel.RECONFIGURATION, Kind.REPLY)

_REPLY_TYPE = {
    "NODE_REG_REQUEST": "NODE_REG_REPLY",
    "GW_REG_REQUEST": "GW_REG_REPLY",
    "PS_REG_REQUEST": "PS_REG_REPLY",
}

_LEG_EVENTS = {
    "sensor": ("ADD_SENSOR_REQ", "REMOVE_SENSOR_REQ"),
    "service": ("ADD_SERVICE_REQ", "REMOVE_SERVICE_REQ"),
    "gw": ("ADD_GW_REQ", "REMOVE_GW_REQ"),
    "ps": ("ADD_PS_REQ", "REMOVE_PS_REQ"),
}


def registration_legs(desc: ResourceDescription) -> list[str]:
    """Reconfiguration legs a resource needs, in choreography order."""
    serves = desc.hw_meta.get("serves") == "yes"
    if desc.role is NodeRole.EXPERIMENTATION:
        return ["sensor"] + (["service"] if serves else [])
    if desc.role is NodeRole.SERVICE_ONLY:
        return ["service"]
    if desc.role is NodeRole.PARTICIPATORY:
        return ["ps"]
    if desc.hw_meta.get("kind") == "gateway":
        return ["gw"]
    return []  # plain infrastructure (repeaters) touches no subsystem


@dataclass
class SoftStateTimer:
    urn: Urn
    invalidation_deadline: Optional[int] = None
    deletion_deadline: Optional[int] = None


@dataclass
class _PendingReg:
    corr: bytes
    reply_type: str
    desc: ResourceDescription
    legs: list[str]
    was_new: bool
    leg_corr: Optional[bytes] = None
    leg_timer: Optional[Timer] = None


@dataclass
class _PendingLeg:
    """A fire-and-forget reconfiguration (restore or removal)."""

    leg: str
    urn: Urn
    purpose: str


class PortalManager:
    def __init__(
        self,
        kernel: Kernel,
        rd: ResourceDirectory,
        bus: BusPort,
        config: TestbedConfig,
    ):
        self.kernel = kernel
        self.rd = rd
        self.bus = bus
        self.config = config
        self.audit: list[dict] = []
        self._pending: dict[bytes, _PendingReg] = {}
        self._pending_by_urn: set[Urn] = set()
        self._processed: set[bytes] = set()
        self._loose_legs: dict[bytes, _PendingLeg] = {}
        self._timers: dict[Urn, SoftStateTimer] = {}

    def start(self) -> None:
        self.bus.subscribe(REG_REQ, self.handle_registration, durable=True)
        self.bus.subscribe(MON_REQ, self.handle_monitoring, durable=True)
        self.bus.subscribe(CFG_REP, self._handle_configurator_reply, durable=True)
        self.kernel.every(self.config.timer_tick_ms, self.expire_timers)

    # ------------------------------------------------------------ registration

    def handle_registration(self, event: ManagementEvent) -> None:
        if event.correlation_id in self._processed or event.correlation_id in self._pending:
            return  # duplicate request: one reply total, no second entry
        reply_type = _REPLY_TYPE.get(event.event_type)
        if reply_type is None:
            return
        try:
            desc = description_from_json(str(event.get(TAG_DESCRIPTION)))
        except ValidationError as exc:
            self._reply(event, reply_type, None, ok=False, cause=f"ValidationError: {exc}")
            return
        if desc.urn in self._pending_by_urn:
            return  # a registration for this resource is already in flight

        now = self.kernel.now()
        existing = self._existing(desc.urn)
        if existing is not None and existing.state is NodeState.ACTIVE:
            # seen before and alive: refresh the soft state, answer idempotently
            if existing.role is not desc.role:
                self._reply(event, reply_type, desc.urn, ok=False, cause="ValidationError: role change")
                return
            self.rd.update(desc.urn, {"last-seen": now})
            self._evidence(desc.urn)
            self._reply(event, reply_type, desc.urn, ok=True)
            return

        if desc.parent_gateway is not None:
            gw = self._existing(desc.parent_gateway)
            if gw is None or gw.state is not NodeState.ACTIVE:
                self._reply(event, reply_type, desc.urn, ok=False, cause="GatewayDisabled")
                return

        was_new = existing is None or existing.state is NodeState.DELETED
        try:
            if existing is not None and existing.state is NodeState.DISABLED:
                self.rd.update(desc.urn, {"state": "active", "last-seen": now})
                stored = self.rd.get(desc.urn)
                self._transition(desc.urn, "disabled", "active", "re-registration")
            else:
                stored = replace(desc, state=NodeState.ACTIVE, registered_at=now, last_seen=now)
                self.rd.register(stored)
                self._transition(desc.urn, "new", "active", "registration")
        except (ValidationError, Conflict) as exc:
            self._reply(event, reply_type, desc.urn, ok=False, cause=f"ValidationError: {exc}")
            return

        pending = _PendingReg(
            corr=event.correlation_id,
            reply_type=reply_type,
            desc=stored,
            legs=registration_legs(stored),
            was_new=was_new,
        )
        self._pending[event.correlation_id] = pending
        self._pending_by_urn.add(desc.urn)
        self._evidence(desc.urn)
        self._advance(pending)

    def _advance(self, pending: _PendingReg) -> None:
        if not pending.legs:
            self._finish(pending, ok=True)
            return
        leg = pending.legs.pop(0)
        add_type, _ = _LEG_EVENTS[leg]
        from .model import description_to_json

        leg_event = make_event(
            add_type,
            self.kernel.now(),
            [
                text(TAG_URN, pending.desc.urn.render()),
                text(TAG_DESCRIPTION, description_to_json(pending.desc)),
            ],
        )
        pending.leg_corr = leg_event.correlation_id

        def timeout(corr: bytes = leg_event.correlation_id) -> None:
            if pending.corr in self._pending and pending.leg_corr == corr:
                self._fail(pending, "ConfiguratorTimeout")

        pending.leg_timer = self.kernel.call_after(self.config.configurator_timeout_ms, timeout)
        self.bus.publish(leg_event)

    def _handle_configurator_reply(self, event: ManagementEvent) -> None:
        loose = self._loose_legs.pop(event.correlation_id, None)
        if loose is not None:
            if not bool(event.get(TAG_OUTCOME)):
                log.warning("reconfiguration %s for %s failed: %s",
                            loose.purpose, loose.urn, event.get(TAG_CAUSE))
            return
        for pending in list(self._pending.values()):
            if pending.leg_corr == event.correlation_id:
                if pending.leg_timer is not None:
                    pending.leg_timer.cancel()
                if bool(event.get(TAG_OUTCOME)):
                    self._advance(pending)
                else:
                    self._fail(pending, "ConfiguratorRejected")
                return

    def _fail(self, pending: _PendingReg, cause: str) -> None:
        urn = pending.desc.urn
        if pending.was_new:
            self.rd.rollback(urn)  # the node retries from scratch
            self._timers.pop(urn, None)
            self._transition(urn, "active", "absent", f"registration-failed:{cause}")
        else:
            try:
                self.rd.update(urn, {"state": "disabled"})
            except NotFound:
                pass
            timer = self._timers.setdefault(urn, SoftStateTimer(urn))
            timer.invalidation_deadline = None
            timer.deletion_deadline = self.kernel.now() + self.config.deletion_ms
            self._transition(urn, "active", "disabled", f"restore-failed:{cause}")
        self._finish(pending, ok=False, cause=cause)

    def _finish(self, pending: _PendingReg, ok: bool, cause: str = "") -> None:
        self._pending.pop(pending.corr, None)
        self._pending_by_urn.discard(pending.desc.urn)
        self._processed.add(pending.corr)
        fields = [
            text(TAG_URN, pending.desc.urn.render()),
            flag(TAG_OUTCOME, ok),
        ]
        if ok:
            fields.append(text(TAG_RESOURCE_URI, self.rd.uri_of(pending.desc.urn)))
        else:
            fields.append(text(TAG_CAUSE, cause))
        self.bus.publish(
            make_event(pending.reply_type, self.kernel.now(), fields, pending.corr)
        )

    def _reply(
        self,
        request: ManagementEvent,
        reply_type: str,
        urn: Optional[Urn],
        ok: bool,
        cause: str = "",
    ) -> None:
        self._processed.add(request.correlation_id)
        fields = [flag(TAG_OUTCOME, ok)]
        if urn is not None:
            fields.insert(0, text(TAG_URN, urn.render()))
            if ok:
                fields.append(text(TAG_RESOURCE_URI, self.rd.uri_of(urn)))
        if cause:
            fields.append(text(TAG_CAUSE, cause))
        self.bus.publish(
            make_event(reply_type, self.kernel.now(), fields, request.correlation_id)
        )

    # ------------------------------------------------------------- monitoring

    def handle_monitoring(self, event: ManagementEvent) -> None:
        if event.event_type == "HELLO":
            self._on_hello(event)
        elif event.event_type == "NODE_STATUS_REQUEST":
            self._on_status(event)
        elif event.event_type == "NODE_INVALIDATION_REQUEST":
            self._on_invalidation(event)
        self.bus.publish(
            make_event(
                "MONITOR_ACK",
                self.kernel.now(),
                [text(TAG_ACKED_TYPE, event.event_type)],
                event.correlation_id,
            )
        )

    def _on_hello(self, event: ManagementEvent) -> None:
        urn = parse_urn(str(event.get(TAG_GATEWAY)))
        desc = self._existing(urn)
        if desc is None or desc.state is NodeState.DELETED:
            log.info("HELLO from unregistered gateway %s ignored", urn)
            return
        now = self.kernel.now()
        if desc.state is NodeState.DISABLED:
            self._restore(desc, "fresh-hello")
        else:
            self.rd.update(urn, {"last-seen": now})
        self._evidence(urn)

    def _on_status(self, event: ManagementEvent) -> None:
        urn = parse_urn(str(event.get(TAG_URN)))
        desc = self._existing(urn)
        if desc is None or desc.state is NodeState.DELETED:
            log.info("status for unknown resource %s ignored", urn)
            return
        meta: dict[str, str] = {}
        battery = event.get(TAG_BATTERY)
        if battery is not None:
            meta["battery"] = f"{float(battery):g}"
        memory = event.get(TAG_FREE_MEMORY)
        if memory is not None:
            meta["free-memory"] = str(int(memory))
        alive = bool(event.get(TAG_ALIVE))
        if not alive:
            if meta:
                self.rd.update(urn, {"hw-meta": meta})
            return  # negative reports are not evidence of life
        update: dict = {"last-seen": self.kernel.now()}
        if meta:
            update["hw-meta"] = meta
        if desc.state is NodeState.DISABLED:
            self._restore(desc, "fresh-status")
        self.rd.update(urn, update)
        self._evidence(urn)

    def _on_invalidation(self, event: ManagementEvent) -> None:
        urn = parse_urn(str(event.get(TAG_URN)))
        desc = self._existing(urn)
        if desc is None or desc.state is not NodeState.ACTIVE:
            return
        self._disable(desc, "gateway-invalidation")

    # ------------------------------------------------------------ soft state

    def _evidence(self, urn: Urn) -> None:
        timer = self._timers.setdefault(urn, SoftStateTimer(urn))
        timer.invalidation_deadline = self.kernel.now() + self.config.invalidation_ms
        timer.deletion_deadline = None

    def expire_timers(self) -> None:
        now = self.kernel.now()
        for timer in list(self._timers.values()):
            desc = self._existing(timer.urn)
            if desc is None:
                self._timers.pop(timer.urn, None)
                continue
            if (
                desc.state is NodeState.ACTIVE
                and timer.invalidation_deadline is not None
                and now >= timer.invalidation_deadline
            ):
                self._disable(desc, "invalidation-timeout")
            elif (
                desc.state is NodeState.DISABLED
                and timer.deletion_deadline is not None
                and now >= timer.deletion_deadline
            ):
                self._delete(desc)

    def _disable(self, desc: ResourceDescription, reason: str) -> None:
        self.rd.update(desc.urn, {"state": "disabled"})
        timer = self._timers.setdefault(desc.urn, SoftStateTimer(desc.urn))
        timer.invalidation_deadline = None
        timer.deletion_deadline = self.kernel.now() + self.config.deletion_ms
        self._transition(desc.urn, "active", "disabled", reason)
        for leg in registration_legs(desc):
            self._send_loose_leg(leg, desc, add=False, purpose=f"disable:{reason}")
        if desc.hw_meta.get("kind") == "gateway":
            for member in self.rd.all_docs():
                if member.parent_gateway == desc.urn and member.state is NodeState.ACTIVE:
                    self._disable(member, "gateway-cascade")

    def _delete(self, desc: ResourceDescription) -> None:
        self.rd.delete(desc.urn)
        self._timers.pop(desc.urn, None)
        self._transition(desc.urn, "disabled", "deleted", "deletion-timeout")

    def _restore(self, desc: ResourceDescription, reason: str) -> None:
        self.rd.update(desc.urn, {"state": "active", "last-seen": self.kernel.now()})
        self._transition(desc.urn, "disabled", "active", reason)
        restored = self.rd.get(desc.urn)
        for leg in registration_legs(restored):
            self._send_loose_leg(leg, restored, add=True, purpose=f"restore:{reason}")

    def _send_loose_leg(
        self, leg: str, desc: ResourceDescription, add: bool, purpose: str
    ) -> None:
        from .model import description_to_json

        add_type, remove_type = _LEG_EVENTS[leg]
        event = make_event(
            add_type if add else remove_type,
            self.kernel.now(),
            [
                text(TAG_URN, desc.urn.render()),
                text(TAG_DESCRIPTION, description_to_json(desc)),
            ],
        )
        self._loose_legs[event.correlation_id] = _PendingLeg(leg, desc.urn, purpose)
        self.bus.publish(event)

    # ------------------------------------------------------------------ admin

    def health(self) -> dict:
        return {
            "status": "ok",
            "now": self.kernel.now(),
            "pending-registrations": len(self._pending),
            "timers": len(self._timers),
        }

    def resources_summary(self) -> dict:
        return self.rd.summary()

    def set_timeouts(self, **kwargs) -> dict:
        self.config = self.config.with_timeouts(**kwargs)
        return {
            "invalidation_ms": self.config.invalidation_ms,
            "deletion_ms": self.config.deletion_ms,
            "configurator_timeout_ms": self.config.configurator_timeout_ms,
        }

    # -------------------------------------------------------------- internals

    def _existing(self, urn: Urn) -> Optional[ResourceDescription]:
        try:
            return self.rd.get(urn)
        except NotFound:
            return None

    def _transition(self, urn: Urn, from_state: str, to_state: str, reason: str) -> None:
        entry = {
            "t": self.kernel.now(),
            "urn": urn.render(),
            "from": from_state,
            "to": to_state,
            "reason": reason,
        }
        self.audit.append(entry)
        log.info("transition %s %s->%s (%s)", urn, from_state, to_state, reason)


class AvailabilityRegistry(Protocol):
    def add_node(self, urn: Urn, desc: ResourceDescription) -> Optional[str]: ...

    def remove_node(self, urn: Urn) -> None: ...

    def add_gateway(self, urn: Urn, desc: ResourceDescription) -> Optional[str]: ...

    def remove_gateway(self, urn: Urn) -> None: ...


class ServiceGate(Protocol):
    def register_source(self, urn: Urn) -> Optional[str]: ...

    def unregister_source(self, urn: Urn) -> None: ...


class ExperimentConfigurator:
    """Applies sensor/gateway reconfiguration to the experiment runtime."""

    def __init__(self, kernel: Kernel, bus: BusPort, registry: AvailabilityRegistry):
        self.kernel = kernel
        self.bus = bus
        self.registry = registry

    def start(self) -> None:
        self.bus.subscribe(
            CFG_REQ,
            self.apply,
            durable=True,
            event_filter=["ADD_SENSOR_REQ", "REMOVE_SENSOR_REQ", "ADD_GW_REQ", "REMOVE_GW_REQ"],
        )

    def apply(self, event: ManagementEvent) -> None:
        urn = parse_urn(str(event.get(TAG_URN)))
        error: Optional[str] = None
        try:
            desc = description_from_json(str(event.get(TAG_DESCRIPTION)))
            if event.event_type == "ADD_SENSOR_REQ":
                if desc.role is not NodeRole.EXPERIMENTATION:
                    error = f"role {desc.role.value} is not reservable"
                else:
                    error = self.registry.add_node(urn, desc)
            elif event.event_type == "REMOVE_SENSOR_REQ":
                self.registry.remove_node(urn)
            elif event.event_type == "ADD_GW_REQ":
                error = self.registry.add_gateway(urn, desc)
            else:
                self.registry.remove_gateway(urn)
        except Exception as exc:
            error = str(exc)
        reply_type = event.event_type[:-3] + "REP"
        fields = [text(TAG_URN, urn.render()), flag(TAG_OUTCOME, error is None)]
        if error is not None:
            fields.append(text(TAG_CAUSE, error))
        self.bus.publish(make_event(reply_type, self.kernel.now(), fields, event.correlation_id))


class ServiceConfigurator:
    """Gates which sources the application-support plane accepts."""

    def __init__(self, kernel: Kernel, bus: BusPort, gate: ServiceGate):
        self.kernel = kernel
        self.bus = bus
        self.gate = gate

    def start(self) -> None:
        self.bus.subscribe(
            CFG_REQ,
            self.apply,
            durable=True,
            event_filter=["ADD_SERVICE_REQ", "REMOVE_SERVICE_REQ", "ADD_PS_REQ", "REMOVE_PS_REQ"],
        )

    def apply(self, event: ManagementEvent) -> None:
        urn = parse_urn(str(event.get(TAG_URN)))
        error: Optional[str] = None
        try:
            if event.event_type in ("ADD_SERVICE_REQ", "ADD_PS_REQ"):
                error = self.gate.register_source(urn)
            else:
                self.gate.unregister_source(urn)
        except Exception as exc:
            error = str(exc)
        reply_type = event.event_type[:-3] + "REP"
        fields = [text(TAG_URN, urn.render()), flag(TAG_OUTCOME, error is None)]
        if error is not None:
            fields.append(text(TAG_CAUSE, error))
        self.bus.publish(make_event(reply_type, self.kernel.now(), fields, event.correlation_id))
