"""Gateway-side management: the per-gateway node manager and its mobile-fleet
counterpart.

Each gateway runs one agent. It watches the service frames crossing its mesh,
discovers unknown emitters by querying their device properties, registers
them upstream over the registration channel, heartbeats on behalf of its
gateway, probes members for liveness/status, and reports unreachable nodes
with invalidation requests. Vehicle nodes have no gateway; one fleet agent
plays the same role for everything arriving over the GPRS uplink.

Agents never touch the experimentation plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .bus.events import (
    Channel,
    Kind,
    ManagementEvent,
    TAG_ALIVE,
    TAG_BATTERY,
    TAG_CPU_LOAD,
    TAG_DESCRIPTION,
    TAG_FREE_MEMORY,
    TAG_GATEWAY,
    TAG_MEMBER_COUNT,
    TAG_OUTCOME,
    TAG_URN,
    Topic,
    f64,
    flag,
    make_event,
    text,
    u64,
)
from .config import TestbedConfig
from .kernel import Kernel
from .model import (
    MOBILE,
    Capability,
    Connection,
    ConnectionType,
    NodeRole,
    NodeState,
    Observation,
    Position,
    ResourceDescription,
    Urn,
    description_to_json,
    parse_urn,
)
from .ports import BusPort
from .sim.world import World

REG_REQ = Topic(Channel.REGISTRATION, Kind.REQUEST)
REG_REP = Topic(Channel.REGISTRATION, Kind.REPLY)
MON_REQ = Topic(Channel.MONITORING, Kind.REQUEST)

ObservationSink = Callable[[Observation], None]


@dataclass
class ManifestEntry:
    """Static per-node deployment facts the installer knew (location, role)."""

    role: NodeRole
    position: object  # Position or MOBILE tag
    serves: bool
    meta: dict[str, str] = field(default_factory=dict)

    def to_doc(self) -> dict:
        position = (
            MOBILE
            if self.position == MOBILE
            else {"lat": self.position.lat, "lon": self.position.lon}  # type: ignore[union-attr]
        )
        return {
            "role": self.role.value,
            "position": position,
            "serves": self.serves,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ManifestEntry":
        pos = doc["position"]
        return cls(
            role=NodeRole(doc["role"]),
            position=MOBILE if pos == MOBILE else Position(float(pos["lat"]), float(pos["lon"])),
            serves=bool(doc["serves"]),
            meta={str(k): str(v) for k, v in doc.get("meta", {}).items()},
        )


def save_manifest(manifest: dict[Urn, ManifestEntry], path) -> None:
    """Write a per-gateway static manifest file (JSON)."""
    import json
    from pathlib import Path

    doc = {urn.render(): entry.to_doc() for urn, entry in sorted(manifest.items(), key=lambda kv: str(kv[0]))}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_manifest(path) -> dict[Urn, ManifestEntry]:
    import json
    from pathlib import Path

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {parse_urn(urn): ManifestEntry.from_doc(entry) for urn, entry in doc.items()}


@dataclass
class NodeTableEntry:
    urn: Urn
    last_frame_at: int = 0
    consecutive_probe_failures: int = 0
    registered: bool = False
    invalidated: bool = False
    battery: Optional[float] = None
    free_memory: Optional[int] = None
    cpu_load: Optional[float] = None


class _AgentBase:
    """Discovery/status machinery shared by gateway and fleet agents."""

    def __init__(
        self,
        kernel: Kernel,
        world: World,
        bus: BusPort,
        config: TestbedConfig,
        sink: Optional[ObservationSink],
        agent_id: str,
    ):
        self.kernel = kernel
        self.world = world
        self.bus = bus
        self.config = config
        self.sink = sink
        self.agent_id = agent_id
        self.table: dict[Urn, NodeTableEntry] = {}
        self._pending_reg: dict[bytes, Urn] = {}
        self._pending_urns: set[Urn] = set()

    # -- registration -------------------------------------------------------

    def _start_discovery(self, src: Urn) -> None:
        """Query device parameters, then emit one registration request."""
        self._pending_urns.add(src)
        props: dict[str, str] = {}
        wanted = ["mac", "capabilities", "battery"]

        def ask(index: int) -> None:
            if index == len(wanted):
                self._publish_registration(src, props)
                return
            name = wanted[index]
            done = {"replied": False}

            def on_reply(value: str) -> None:
                if done["replied"]:
                    return
                done["replied"] = True
                props[name] = value
                ask(index + 1)

            def on_timeout() -> None:
                if not done["replied"]:
                    done["replied"] = True
                    self._pending_urns.discard(src)  # retried on the next frame

            self._command(src, "getPropertyValue", name, on_reply)
            self.kernel.call_after(self.config.probe_reply_timeout_ms, on_timeout)

        ask(0)

    def _publish_registration(self, src: Urn, props: dict[str, str]) -> None:
        desc = self._build_description(src, props)
        if desc is None:
            self._pending_urns.discard(src)
            return
        event = make_event(
            self._registration_type(),
            self.kernel.now(),
            [
                text(TAG_URN, src.render()),
                text(TAG_DESCRIPTION, description_to_json(desc)),
                text(TAG_GATEWAY, self._gateway_field()),
            ],
        )
        self._pending_reg[event.correlation_id] = src
        self.bus.publish(event)

        def give_up(corr: bytes = event.correlation_id) -> None:
            if corr in self._pending_reg:
                urn = self._pending_reg.pop(corr)
                self._pending_urns.discard(urn)

        self.kernel.call_after(self.config.registration_retry_ms, give_up)

    def _on_registration_reply(self, event: ManagementEvent) -> None:
        src = self._pending_reg.pop(event.correlation_id, None)
        if src is None:
            return
        self._pending_urns.discard(src)
        if bool(event.get(TAG_OUTCOME)):
            entry = self.table.setdefault(src, NodeTableEntry(src))
            entry.registered = True
            entry.invalidated = False
            entry.last_frame_at = self.kernel.now()

    # -- frames ---------------------------------------------------------------

    def _on_frame(self, src: Urn, observations: tuple[Observation, ...]) -> str:
        entry = self.table.get(src)
        if entry is not None and entry.registered:
            entry.last_frame_at = self.kernel.now()
            entry.consecutive_probe_failures = 0
            if self.sink is not None:
                for obs in observations:
                    self.sink(obs)
            return "forwarded"
        if src in self._pending_urns:
            return "registration-pending"
        self._start_discovery(src)
        return "discovery-started"

    # -- probing ----------------------------------------------------------------

    def _probe_round(self) -> None:
        for entry in list(self.table.values()):
            if entry.registered:
                self._probe_one(entry)

    def _probe_one(self, entry: NodeTableEntry) -> None:
        results: dict[str, str] = {}
        steps = [("isAlive", None), ("getPropertyValue", "battery"), ("getPropertyValue", "free-memory")]
        done = {"failed": False, "finished": False}

        def run(index: int) -> None:
            if index == len(steps):
                done["finished"] = True
                self._finish_probe(entry, results)
                return
            op, arg = steps[index]
            answered = {"ok": False}

            def on_reply(value: str) -> None:
                if answered["ok"]:
                    return
                answered["ok"] = True
                results[arg or op] = value
                run(index + 1)

            def on_timeout() -> None:
                if not answered["ok"] and not done["failed"]:
                    done["failed"] = True
                    self._probe_failed(entry)

            self._command(entry.urn, op, arg, on_reply)
            self.kernel.call_after(self.config.probe_reply_timeout_ms, on_timeout)

        run(0)

    def _finish_probe(self, entry: NodeTableEntry, results: dict[str, str]) -> None:
        entry.consecutive_probe_failures = 0
        entry.invalidated = False
        entry.battery = float(results.get("battery", "0") or 0)
        entry.free_memory = int(results.get("free-memory", "0") or 0)
        self._publish_status(entry, alive=True)

    def _probe_failed(self, entry: NodeTableEntry) -> None:
        entry.consecutive_probe_failures += 1
        self._publish_status(entry, alive=False)
        if (
            entry.consecutive_probe_failures >= self.config.probe_fail_threshold
            and not entry.invalidated
        ):
            entry.invalidated = True
            self.bus.publish(
                make_event(
                    "NODE_INVALIDATION_REQUEST",
                    self.kernel.now(),
                    [text(TAG_URN, entry.urn.render()), text(TAG_GATEWAY, self._gateway_field())],
                )
            )

    def _publish_status(self, entry: NodeTableEntry, alive: bool) -> None:
        fields = [
            text(TAG_URN, entry.urn.render()),
            flag(TAG_ALIVE, alive),
            text(TAG_GATEWAY, self._gateway_field()),
        ]
        if entry.battery is not None:
            fields.append(f64(TAG_BATTERY, entry.battery))
        if entry.free_memory is not None:
            fields.append(u64(TAG_FREE_MEMORY, entry.free_memory))
        self.bus.publish(make_event("NODE_STATUS_REQUEST", self.kernel.now(), fields))

    # -- hooks filled in by the concrete agents ------------------------------------

    def _command(self, target: Urn, op: str, arg: Optional[str], on_reply) -> None:
        raise NotImplementedError

    def _registration_type(self) -> str:
        raise NotImplementedError

    def _gateway_field(self) -> str:
        raise NotImplementedError

    def _build_description(self, src: Urn, props: dict[str, str]) -> Optional[ResourceDescription]:
        raise NotImplementedError


def _capabilities_from_props(props: dict[str, str]) -> tuple[Capability, ...]:
    caps = []
    for item in (props.get("capabilities") or "").split(","):
        if not item:
            continue
        parts = item.split(":")
        accuracy = float(parts[2]) if len(parts) > 2 else None
        caps.append(Capability(parts[0], parts[1] if len(parts) > 1 else "", accuracy))
    return tuple(caps)


class GatewayAgent(_AgentBase):
    """NodeManager instance for one gateway cluster."""

    def __init__(
        self,
        kernel: Kernel,
        world: World,
        bus: BusPort,
        gw_urn: Urn,
        manifest: dict[Urn, ManifestEntry],
        config: TestbedConfig,
        sink: Optional[ObservationSink] = None,
    ):
        super().__init__(kernel, world, bus, config, sink, agent_id=f"agent-{gw_urn.node_id}")
        self.gw_urn = gw_urn
        self.manifest = manifest
        self.gw_registered = False
        self._gw_reg_corr: Optional[bytes] = None
        world.set_management_tap(gw_urn, self.on_service_frame)

    def start(self) -> None:
        self.bus.subscribe(
            REG_REP,
            self._on_reply,
            durable=True,
            event_filter=["NODE_REG_REPLY", "GW_REG_REPLY"],
        )
        self._register_gateway()
        self.kernel.every(self.config.heartbeat_ms, self._heartbeat,
                          phase_ms=self.config.heartbeat_ms)
        self.kernel.every(self.config.probe_ms, self._guarded_probe_round,
                          phase_ms=self.config.probe_ms)

    # -- gateway registration ---------------------------------------------------

    def _register_gateway(self) -> None:
        gw_entry = self.manifest[self.gw_urn]
        desc = ResourceDescription(
            urn=self.gw_urn,
            role=NodeRole.INFRASTRUCTURAL,
            capabilities=(),
            position=gw_entry.position,
            connection=Connection(self.gw_urn.node_id, ConnectionType.WIRED),
            state=NodeState.ACTIVE,
            hw_meta={"kind": "gateway", **gw_entry.meta},
            registered_at=self.kernel.now(),
            last_seen=self.kernel.now(),
        )
        event = make_event(
            "GW_REG_REQUEST",
            self.kernel.now(),
            [
                text(TAG_URN, self.gw_urn.render()),
                text(TAG_DESCRIPTION, description_to_json(desc)),
                text(TAG_GATEWAY, self.gw_urn.render()),
            ],
        )
        self._gw_reg_corr = event.correlation_id
        self.bus.publish(event)

        def retry() -> None:
            if not self.gw_registered:
                self._register_gateway()

        self.kernel.call_after(self.config.registration_retry_ms, retry)

    def _on_reply(self, event: ManagementEvent) -> None:
        if event.event_type == "GW_REG_REPLY":
            if event.correlation_id == self._gw_reg_corr and bool(event.get(TAG_OUTCOME)):
                self.gw_registered = True
            return
        self._on_registration_reply(event)

    # -- frame handling ------------------------------------------------------------

    def on_service_frame(self, src: Urn, observations: tuple[Observation, ...]) -> str:
        """World tap: every management frame reaching this gateway lands here."""
        if not self.gw_registered:
            return "gateway-unregistered"
        return self._on_frame(src, observations)

    # -- periodic work ----------------------------------------------------------------

    def _heartbeat(self) -> None:
        if not self.world.is_alive(self.gw_urn) or not self.gw_registered:
            return
        members = sum(1 for e in self.table.values() if e.registered)
        self.bus.publish(
            make_event(
                "HELLO",
                self.kernel.now(),
                [text(TAG_GATEWAY, self.gw_urn.render()), u64(TAG_MEMBER_COUNT, members)],
            )
        )

    def _guarded_probe_round(self) -> None:
        if self.world.is_alive(self.gw_urn):
            self._probe_round()

    # -- hooks ---------------------------------------------------------------------------

    def _command(self, target: Urn, op: str, arg: Optional[str], on_reply) -> None:
        if not self.world.is_alive(self.gw_urn):
            return
        self.world.node_command(target, op, arg, on_reply, via_gw=self.gw_urn)

    def _registration_type(self) -> str:
        return "NODE_REG_REQUEST"

    def _gateway_field(self) -> str:
        return self.gw_urn.render()

    def _build_description(self, src: Urn, props: dict[str, str]) -> Optional[ResourceDescription]:
        entry = self.manifest.get(src)
        if entry is None:
            return None  # unknown hardware: leave for the operator to seed
        return ResourceDescription(
            urn=src,
            role=entry.role,
            capabilities=_capabilities_from_props(props),
            position=entry.position,
            connection=Connection(props.get("mac", "unknown"), ConnectionType.MESH),
            state=NodeState.ACTIVE,
            parent_gateway=self.gw_urn,
            hw_meta={
                **entry.meta,
                "serves": "yes" if entry.serves else "no",
                "battery": props.get("battery", ""),
            },
            registered_at=self.kernel.now(),
            last_seen=self.kernel.now(),
        )


class MobileFleetAgent(_AgentBase):
    """NodeManager counterpart for GPRS-uplinked vehicle nodes."""

    def __init__(
        self,
        kernel: Kernel,
        world: World,
        bus: BusPort,
        manifest: dict[Urn, ManifestEntry],
        config: TestbedConfig,
        sink: Optional[ObservationSink] = None,
    ):
        super().__init__(kernel, world, bus, config, sink, agent_id="agent-fleet")
        self.manifest = manifest
        world.set_gprs_tap(self.on_uplink_frame)

    def start(self) -> None:
        self.bus.subscribe(
            REG_REP, self._on_registration_reply, durable=True, event_filter=["NODE_REG_REPLY"]
        )
        self.kernel.every(self.config.probe_ms, self._probe_round, phase_ms=self.config.probe_ms)

    def on_uplink_frame(self, src: Urn, observations: tuple[Observation, ...]) -> str:
        return self._on_frame(src, observations)

    def _command(self, target: Urn, op: str, arg: Optional[str], on_reply) -> None:
        self.world.node_command(target, op, arg, on_reply)

    def _registration_type(self) -> str:
        return "NODE_REG_REQUEST"

    def _gateway_field(self) -> str:
        return ""

    def _build_description(self, src: Urn, props: dict[str, str]) -> Optional[ResourceDescription]:
        entry = self.manifest.get(src)
        if entry is None:
            return None
        return ResourceDescription(
            urn=src,
            role=entry.role,
            capabilities=_capabilities_from_props(props),
            position=MOBILE,
            connection=Connection(props.get("mac", "unknown"), ConnectionType.GPRS),
            state=NodeState.ACTIVE,
            hw_meta={
                **entry.meta,
                "serves": "yes" if entry.serves else "no",
                "battery": props.get("battery", ""),
            },
            registered_at=self.kernel.now(),
            last_seen=self.kernel.now(),
        )


class ParticipatorySource:
    """Synthetic citizen-phone source: registers itself, then feeds readings."""

    def __init__(self, kernel: Kernel, bus: BusPort, urn_text: str,
                 phenomena: tuple[str, ...] = ("noise", "temperature")):
        self.kernel = kernel
        self.bus = bus
        self.urn = parse_urn(urn_text)
        self.phenomena = phenomena

    def register(self) -> bytes:
        desc = ResourceDescription(
            urn=self.urn,
            role=NodeRole.PARTICIPATORY,
            capabilities=tuple(Capability(p, "u") for p in self.phenomena),
            position=MOBILE,
            connection=Connection("app", ConnectionType.GPRS),
            state=NodeState.ACTIVE,
            hw_meta={"serves": "yes", "kind": "phone"},
            registered_at=self.kernel.now(),
            last_seen=self.kernel.now(),
        )
        event = make_event(
            "PS_REG_REQUEST",
            self.kernel.now(),
            [text(TAG_URN, self.urn.render()), text(TAG_DESCRIPTION, description_to_json(desc))],
        )
        self.bus.publish(event)
        return event.correlation_id

    def observation(self, phenomenon: str, value: float, lat: float, lon: float) -> Observation:
        return Observation(
            source=self.urn,
            phenomenon=phenomenon,
            value=value,
            unit="u",
            position=Position(lat, lon),
            timestamp=self.kernel.now(),
            speed=0.0,
            course=0.0,
        )
