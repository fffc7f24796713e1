"""The simulated city: nodes, gateways, dual radio planes, mobility, faults.

The world is owned by the discrete-event kernel; nothing here blocks. Frames
hop link by link with per-hop latency and Bernoulli loss; management frames
ride the cluster mesh to the cluster-head gateway (or the GPRS uplink for
vehicles), experiment frames ride the separate cluster-agnostic plane. Every
externally visible event is appended to a trace whose rendering is
byte-identical across runs with the same (seed, topology, fault schedule).
"""

from __future__ import annotations

import hashlib
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..geo import bearing_deg, haversine_m, interpolate
from ..kernel import Kernel
from ..model import Capability, NodeRole, Observation, Position, Urn
from .behaviors import Behavior, make_behavior
from .topology import GatewaySpec, NodeSpec, Route, Topology

MGMT = "management"
EXP = "experimentation"


class UnknownUrn(KeyError):
    pass


class NoRoute(Exception):
    pass


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.md5(text.encode()).digest()[:8], "big")


@dataclass
class InstalledImage:
    image_id: str
    version: int
    behavior_id: str


@dataclass
class _NodeRt:
    spec: NodeSpec
    alive: bool = True
    battery: float = 100.0
    installed: InstalledImage = field(
        default_factory=lambda: InstalledImage("factory", 1, "default-sense")
    )
    behavior: Optional[Behavior] = None
    degrade_loss: Optional[float] = None
    boots: int = 0


@dataclass
class _GwRt:
    spec: GatewaySpec
    alive: bool = True
    degrade_loss: Optional[float] = None


# sensing baselines per phenomenon: (base, diurnal amplitude, jitter)
_PHENOMENON_MODEL: dict[str, tuple[float, float, float]] = {
    "temperature": (16.0, 5.0, 0.4),
    "light": (400.0, 380.0, 25.0),
    "noise": (55.0, 12.0, 3.0),
    "co": (0.6, 0.3, 0.05),
    "no2": (21.0, 8.0, 2.0),
    "o3": (40.0, 15.0, 3.0),
    "particles": (12.0, 6.0, 1.5),
    "relative-humidity": (70.0, 15.0, 2.0),
    "soil-moisture-tension": (9.0, 2.0, 0.5),
    "soil-temperature": (12.0, 3.0, 0.3),
    "solar-radiation": (300.0, 290.0, 20.0),
    "atmospheric-pressure": (1015.0, 4.0, 0.6),
    "wind-speed": (4.0, 2.5, 0.8),
    "rainfall": (0.4, 0.4, 0.2),
    "water-flow": (2.0, 1.0, 0.2),
}

_DAY_MS = 86_400_000

ManagementTap = Callable[[Urn, tuple[Observation, ...]], None]
ExperimentTap = Callable[[Urn, bytes], None]


class World:
    def __init__(self, kernel: Kernel, topology: Topology, seed: int = 0):
        self.kernel = kernel
        self.topology = topology
        self.params = topology.params
        self.seed = seed
        self._rng = random.Random(seed)
        self.nodes: dict[Urn, _NodeRt] = {}
        self.gateways: dict[Urn, _GwRt] = {}
        self.trace: list[tuple] = []
        self._route_version = 0
        self._mgmt_route_cache: dict[tuple, Optional[list[Urn]]] = {}
        self._exp_route_cache: dict[tuple, Optional[list[Urn]]] = {}
        self._profiles: dict[tuple[Urn, str], list[tuple[int, float]]] = {}
        self._mgmt_taps: dict[Urn, ManagementTap] = {}
        self._gprs_tap: Optional[ManagementTap] = None
        self._exp_uplink_taps: dict[Urn, ExperimentTap] = {}
        self._gprs_exp_tap: Optional[ExperimentTap] = None
        self._contacts: set[tuple[Urn, Urn]] = set()

        self.base_loss = topology.params.loss
        for gw_urn, gw in topology.gateways.items():
            self.gateways[gw_urn] = _GwRt(gw)
        for urn, spec in topology.nodes.items():
            rt = _NodeRt(spec, battery=spec.battery)
            rt.behavior = make_behavior(rt.installed.behavior_id)
            self.nodes[urn] = rt

        self._exp_adjacency = self._build_exp_adjacency()

        for urn, rt in self.nodes.items():
            period = rt.spec.emission_ms
            phase = 1 + stable_hash(urn.render()) % max(1, period - 1)
            kernel.every(period, self._make_emitter(urn), phase_ms=phase)

        if self.params.contact_scan_ms > 0:
            kernel.every(self.params.contact_scan_ms, self._scan_contacts)

    # ------------------------------------------------------------------ taps

    def set_management_tap(self, gw: Urn, tap: ManagementTap) -> None:
        self._mgmt_taps[gw] = tap

    def set_gprs_tap(self, tap: ManagementTap) -> None:
        self._gprs_tap = tap

    def set_experiment_uplink_tap(self, gw: Urn, tap: ExperimentTap) -> None:
        self._exp_uplink_taps[gw] = tap

    def set_gprs_experiment_tap(self, tap: ExperimentTap) -> None:
        self._gprs_exp_tap = tap

    # ------------------------------------------------------------- stepping

    def now(self) -> int:
        return self.kernel.now()

    def step(self, dt_ms: int) -> list[tuple]:
        """Advance the clock, returning the events emitted in the window."""
        if dt_ms <= 0:
            raise ValueError("dt must be positive")
        mark = len(self.trace)
        self.kernel.run_until(self.kernel.now() + dt_ms)
        return self.trace[mark:]

    def trace_lines(self, entries: Optional[list[tuple]] = None) -> list[str]:
        return [" ".join(str(part) for part in entry) for entry in (entries or self.trace)]

    def _record(self, kind: str, plane: str, src, dst, info: str = "-") -> None:
        self.trace.append((self.kernel.now(), kind, plane, src, dst, info))

    # ------------------------------------------------------------- liveness

    def node_rt(self, urn: Urn) -> _NodeRt:
        try:
            return self.nodes[urn]
        except KeyError:
            raise UnknownUrn(str(urn)) from None

    def is_alive(self, urn: Urn) -> bool:
        if urn in self.nodes:
            return self.nodes[urn].alive
        if urn in self.gateways:
            return self.gateways[urn].alive
        raise UnknownUrn(str(urn))

    def set_battery(self, urn: Urn, pct: float) -> None:
        self.node_rt(urn).battery = pct

    def inject_fault(self, target: Urn, kind: str, at: Optional[int] = None, p: float = 1.0) -> None:
        """Schedule a failure (or a revival) at simulated time ``at``."""
        if target not in self.nodes and target not in self.gateways:
            raise UnknownUrn(str(target))
        if kind not in ("node-death", "gw-death", "link-degrade", "revive"):
            raise ValueError(f"unknown fault kind {kind!r}")

        def apply() -> None:
            self._record("fault", MGMT, target, "-", kind)
            if kind == "link-degrade":
                if target in self.nodes:
                    self.nodes[target].degrade_loss = p
                else:
                    self.gateways[target].degrade_loss = p
            elif kind == "revive":
                if target in self.nodes:
                    node = self.nodes[target]
                    node.alive = True
                    node.degrade_loss = None
                    self._boot(target)
                else:
                    gw = self.gateways[target]
                    gw.alive = True
                    gw.degrade_loss = None
            elif target in self.nodes:
                self.nodes[target].alive = False
            else:
                self.gateways[target].alive = False
            self._route_version += 1

        self.kernel.call_at(at if at is not None else self.kernel.now(), apply)

    # ------------------------------------------------------------- geometry

    def position_of(self, urn: Urn, at: Optional[int] = None) -> Position:
        t = self.kernel.now() if at is None else at
        if urn in self.gateways:
            return self.gateways[urn].spec.position
        spec = self.node_rt(urn).spec
        if isinstance(spec.location, Position):
            return spec.location
        return self._route_state(spec.location, t)[0]

    def velocity_of(self, urn: Urn, at: Optional[int] = None) -> tuple[float, float]:
        """(speed m/s, course degrees) for mobile nodes; (0, 0) for fixed."""
        t = self.kernel.now() if at is None else at
        spec = self.node_rt(urn).spec
        if not isinstance(spec.location, Route):
            return 0.0, 0.0
        return spec.location.speed_mps, self._route_state(spec.location, t)[1]

    @staticmethod
    def _route_state(route: Route, t_ms: int) -> tuple[Position, float]:
        points = list(route.waypoints) + [route.waypoints[0]]  # closed loop
        legs = []
        total = 0.0
        for a, b in zip(points, points[1:]):
            d = haversine_m(a.lat, a.lon, b.lat, b.lon)
            legs.append((a, b, d))
            total += d
        if total <= 0:
            return route.waypoints[0], 0.0
        travelled = (route.speed_mps * t_ms / 1000.0) % total
        for a, b, d in legs:
            if travelled <= d and d > 0:
                frac = travelled / d
                lat, lon = interpolate(a.lat, a.lon, b.lat, b.lon, frac)
                return Position(lat, lon), bearing_deg(a.lat, a.lon, b.lat, b.lon)
            travelled -= d
        last = legs[-1]
        return last[1], bearing_deg(last[0].lat, last[0].lon, last[1].lat, last[1].lon)

    def distance_m(self, a: Urn, b: Urn, at: Optional[int] = None) -> float:
        pa, pb = self.position_of(a, at), self.position_of(b, at)
        return haversine_m(pa.lat, pa.lon, pb.lat, pb.lon)

    # ------------------------------------------------------------ sensing

    def set_profile(self, urn: Urn, phenomenon: str, points: list[tuple[int, float]]) -> None:
        """Pin a sensor to a piecewise-linear value curve (scenario scripting)."""
        self.node_rt(urn)
        self._profiles[(urn, phenomenon)] = sorted(points)

    def _value(self, urn: Urn, cap: Capability, t: int) -> float:
        profile = self._profiles.get((urn, cap.phenomenon))
        if profile is not None:
            return _piecewise(profile, t)
        if cap.phenomenon == "car-presence":
            slot = t // 600_000  # occupancy persists ~10 min
            return float(stable_hash(f"{urn}|car|{slot}") % 2)
        base, amp, jitter = _PHENOMENON_MODEL.get(cap.phenomenon, (10.0, 2.0, 0.5))
        phase = (stable_hash(f"{urn}|{cap.phenomenon}") % 1000) / 1000.0
        diurnal = amp * math.sin(2 * math.pi * ((t % _DAY_MS) / _DAY_MS + phase))
        noise = ((stable_hash(f"{urn}|{cap.phenomenon}|{t}") % 10_000) / 10_000.0 - 0.5) * 2 * jitter
        return round(base + diurnal + noise, 3)

    def observations_for(self, urn: Urn, t: Optional[int] = None) -> tuple[Observation, ...]:
        t = self.kernel.now() if t is None else t
        rt = self.node_rt(urn)
        pos = self.position_of(urn, t)
        speed: Optional[float] = None
        course: Optional[float] = None
        if rt.spec.mobile:
            speed, course = self.velocity_of(urn, t)
        return tuple(
            Observation(
                source=urn,
                phenomenon=cap.phenomenon,
                value=self._value(urn, cap, t),
                unit=cap.unit,
                position=pos,
                timestamp=t,
                speed=speed,
                course=course,
                plane=MGMT,
            )
            for cap in rt.spec.sensors
        )

    # ------------------------------------------------------------ emission

    def _make_emitter(self, urn: Urn) -> Callable[[], None]:
        def emit() -> None:
            rt = self.nodes[urn]
            if not rt.alive:
                return
            observations = self.observations_for(urn)
            if rt.spec.mobile or rt.spec.role is NodeRole.PARTICIPATORY:
                self._record("gprs-uplink", MGMT, urn, "portal", f"n={len(observations)}")
                self._gprs_deliver(urn, observations)
            else:
                self._record(
                    "service-frame", MGMT, urn, rt.spec.cluster, f"n={len(observations)}"
                )
                self._mgmt_frame_to_gateway(urn, observations)

        return emit

    def _gprs_deliver(self, urn: Urn, observations: tuple[Observation, ...]) -> None:
        if self._rng.random() < self.params.gprs_loss:
            return
        def arrive() -> None:
            if self._gprs_tap is not None:
                self._gprs_tap(urn, observations)
        self.kernel.call_after(self.params.gprs_latency_ms, arrive)

    # ----------------------------------------------------------- management

    def route_management_frame(self, src: Urn) -> list[Urn]:
        """Hop list from a cluster member to its gateway over surviving links.

        Minimal-hop; ties broken toward the lexicographically smallest next
        node id. Raises NoRoute if the member is partitioned from its head.
        """
        spec = self.node_rt(src).spec
        if spec.cluster is None:
            raise NoRoute(f"{src} is not a mesh cluster member")
        gw = spec.cluster
        path = self._mgmt_path(gw, src, toward_gw=True)
        if path is None:
            raise NoRoute(f"{src} cannot reach {gw}")
        return path

    def _mgmt_path(self, gw: Urn, src: Urn, toward_gw: bool) -> Optional[list[Urn]]:
        key = (self._route_version, gw, src, toward_gw)
        if key in self._mgmt_route_cache:
            return self._mgmt_route_cache[key]
        cluster = self.topology.clusters.get(gw)
        if cluster is None:
            self._mgmt_route_cache[key] = None
            return None
        adjacency: dict[Urn, list[Urn]] = {}
        for a, b in cluster.mesh_edges:
            adjacency.setdefault(a, []).append(b)
            adjacency.setdefault(b, []).append(a)
        for neighbors in adjacency.values():
            neighbors.sort(key=lambda u: u.node_id)

        def usable(urn: Urn) -> bool:
            if urn == gw:
                return self.gateways[gw].alive
            node = self.nodes.get(urn)
            return node is not None and node.alive

        start, goal = (src, gw) if toward_gw else (gw, src)
        if not usable(start) or not usable(goal):
            self._mgmt_route_cache[key] = None
            return None
        prev: dict[Urn, Urn] = {}
        seen = {start}
        frontier = deque([start])
        while frontier:
            cur = frontier.popleft()
            if cur == goal:
                break
            for nxt in adjacency.get(cur, []):
                if nxt not in seen and usable(nxt):
                    seen.add(nxt)
                    prev[nxt] = cur
                    frontier.append(nxt)
        if goal not in seen:
            self._mgmt_route_cache[key] = None
            return None
        hops = []
        cur = goal
        while cur != start:
            hops.append(cur)
            cur = prev[cur]
        hops.reverse()
        self._mgmt_route_cache[key] = hops
        return hops

    def set_loss(self, p: float) -> None:
        """Override the per-hop loss probability for every radio link."""
        if not (0.0 <= p <= 1.0):
            raise ValueError("loss must be within [0,1]")
        self.base_loss = p
        self._record("set-loss", MGMT, "-", "-", f"{p:g}")

    def _link_loss(self, a: Urn, b: Urn) -> float:
        loss = self.base_loss
        for urn in (a, b):
            node = self.nodes.get(urn)
            if node is not None and node.degrade_loss is not None:
                loss = max(loss, node.degrade_loss)
            gw = self.gateways.get(urn)
            if gw is not None and gw.degrade_loss is not None:
                loss = max(loss, gw.degrade_loss)
        return loss

    def _walk(self, src: Urn, hops: list[Urn], plane: str, on_arrival: Callable[[], None]) -> None:
        """Schedule a frame along precomputed hops with per-hop loss/latency."""

        def advance(prev: Urn, remaining: list[Urn]) -> None:
            if not remaining:
                on_arrival()
                return
            nxt = remaining[0]
            if self._rng.random() < self._link_loss(prev, nxt):
                self._record("frame-lost", plane, prev, nxt)
                return

            def hop() -> None:
                if not self.is_alive(nxt):
                    self._record("frame-dropped", plane, prev, nxt, "dead-relay")
                    return
                advance(nxt, remaining[1:])

            self.kernel.call_after(self.params.hop_latency_ms, hop)

        advance(src, hops)

    def _mgmt_frame_to_gateway(self, src: Urn, observations: tuple[Observation, ...]) -> None:
        spec = self.nodes[src].spec
        gw = spec.cluster
        if gw is None:
            return
        hops = self._mgmt_path(gw, src, toward_gw=True)
        if hops is None:
            self._record("frame-dropped", MGMT, src, gw, "no-route")
            return

        def deliver() -> None:
            self._record("mgmt-delivery", MGMT, src, gw, f"n={len(observations)}")
            tap = self._mgmt_taps.get(gw)
            if tap is not None:
                tap(src, observations)

        self._walk(src, hops, MGMT, deliver)

    # Node API commands travel gateway -> node and back on the mesh (or the
    # GPRS uplink for vehicle nodes); silence, not an error, signals loss.
    def node_command(
        self,
        target: Urn,
        op: str,
        arg: Optional[str] = None,
        on_reply: Optional[Callable[[str], None]] = None,
        via_gw: Optional[Urn] = None,
    ) -> None:
        if target not in self.nodes:
            raise UnknownUrn(str(target))
        spec = self.nodes[target].spec
        if spec.mobile:
            self._gprs_command(target, op, arg, on_reply)
            return
        gw = via_gw if via_gw is not None else spec.cluster
        if gw is None:
            raise NoRoute(f"{target} has no cluster gateway")
        down = self._mgmt_path(gw, target, toward_gw=False)
        if down is None:
            return

        def at_node() -> None:
            reply = self._apply_command(target, op, arg)
            if reply is None or on_reply is None:
                return
            up = self._mgmt_path(gw, target, toward_gw=True)
            if up is None:
                return
            self._walk(target, up, MGMT, lambda: on_reply(reply))

        self._walk(gw, down, MGMT, at_node)

    def _gprs_command(
        self, target: Urn, op: str, arg: Optional[str], on_reply: Optional[Callable[[str], None]]
    ) -> None:
        if self._rng.random() < self.params.gprs_loss:
            return

        def at_node() -> None:
            reply = self._apply_command(target, op, arg)
            if reply is None or on_reply is None:
                return
            if self._rng.random() < self.params.gprs_loss:
                return
            self.kernel.call_after(self.params.gprs_latency_ms, lambda: on_reply(reply))

        self.kernel.call_after(self.params.gprs_latency_ms, at_node)

    def _apply_command(self, target: Urn, op: str, arg: Optional[str]) -> Optional[str]:
        rt = self.nodes[target]
        if not rt.alive:
            return None
        if op == "isAlive":
            return "true"
        if op == "reset":
            self._boot(target)
            return "ok"
        if op == "getPropertyValue":
            return self._property_value(rt, arg or "")
        return None

    def _property_value(self, rt: _NodeRt, name: str) -> str:
        urn = rt.spec.urn
        if name == "mac":
            return ":".join(f"{b:02x}" for b in hashlib.md5(urn.render().encode()).digest()[:6])
        if name == "battery":
            return f"{rt.battery:.0f}"
        if name == "free-memory":
            return str(4096 + stable_hash(f"{urn}|mem") % 2048)
        if name == "cpu-load":
            return f"{(stable_hash(f'{urn}|cpu|{self.kernel.now() // 60000}') % 100) / 100:.2f}"
        if name == "capabilities":
            return ",".join(
                f"{c.phenomenon}:{c.unit}" + (f":{c.accuracy}" if c.accuracy is not None else "")
                for c in rt.spec.sensors
            )
        if name == "emission-period":
            return str(rt.spec.emission_ms)
        if name == "image-version":
            return str(rt.installed.version)
        if name == "behavior":
            return rt.installed.behavior_id
        return ""

    # ---------------------------------------------------------- experiment

    def _build_exp_adjacency(self) -> dict[Urn, list[Urn]]:
        fixed: list[tuple[Urn, Position]] = []
        for gw_urn, gw in self.gateways.items():
            fixed.append((gw_urn, gw.spec.position))
        for urn, rt in self.nodes.items():
            if not rt.spec.mobile and rt.spec.role is not NodeRole.PARTICIPATORY:
                assert isinstance(rt.spec.location, Position)
                fixed.append((urn, rt.spec.location))
        adjacency: dict[Urn, list[Urn]] = {urn: [] for urn, _ in fixed}
        rng_m = self.params.radio_range_m
        # bucket by ~range-sized cells so city-scale builds stay near-linear
        lat_cell = rng_m / 111_195.0
        lon_scale = max(0.05, math.cos(math.radians(fixed[0][1].lat))) if fixed else 1.0
        lon_cell = rng_m / (111_195.0 * lon_scale)
        buckets: dict[tuple[int, int], list[tuple[Urn, Position]]] = {}
        for urn, pos in fixed:
            key = (int(pos.lat // lat_cell), int(pos.lon // lon_cell))
            buckets.setdefault(key, []).append((urn, pos))
        for (ci, cj), members in buckets.items():
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    others = buckets.get((ci + di, cj + dj))
                    if others is None:
                        continue
                    for ua, pa in members:
                        for ub, pb in others:
                            if ua.render() >= ub.render():
                                continue
                            if haversine_m(pa.lat, pa.lon, pb.lat, pb.lon) <= rng_m:
                                adjacency[ua].append(ub)
                                adjacency[ub].append(ua)
        for neighbors in adjacency.values():
            neighbors.sort(key=lambda u: u.node_id)
        return adjacency

    def experiment_neighbors(self, urn: Urn) -> list[Urn]:
        """Nodes currently within experiment-radio range (mobiles included)."""
        out = list(self._exp_adjacency.get(urn, []))
        pos = self.position_of(urn)
        for other, rt in self.nodes.items():
            if other == urn or not rt.spec.mobile:
                continue
            p = self.position_of(other)
            if haversine_m(pos.lat, pos.lon, p.lat, p.lon) <= self.params.radio_range_m:
                out.append(other)
        return out

    def _exp_path(self, src: Urn, dst: Urn) -> Optional[list[Urn]]:
        key = (self._route_version, src, dst)
        if key in self._exp_route_cache:
            return self._exp_route_cache[key]

        def usable(urn: Urn) -> bool:
            try:
                return self.is_alive(urn)
            except UnknownUrn:
                return False

        if not usable(src) or not usable(dst):
            self._exp_route_cache[key] = None
            return None
        prev: dict[Urn, Urn] = {}
        seen = {src}
        frontier = deque([src])
        while frontier:
            cur = frontier.popleft()
            if cur == dst:
                break
            for nxt in self._exp_adjacency.get(cur, []):
                if nxt not in seen and usable(nxt):
                    seen.add(nxt)
                    prev[nxt] = cur
                    frontier.append(nxt)
        if dst not in seen:
            self._exp_route_cache[key] = None
            return None
        hops = []
        cur = dst
        while cur != src:
            hops.append(cur)
            cur = prev[cur]
        hops.reverse()
        self._exp_route_cache[key] = hops
        return hops

    def send_experiment_downlink(
        self,
        gw: Urn,
        target: Urn,
        payload: bytes,
        on_ack: Optional[Callable[[], None]] = None,
    ) -> bool:
        """Deliver an experimenter payload to a node over the experiment plane.

        The radio acknowledges delivery end to end (MAC-level ack riding the
        reverse path, subject to the same loss); ``on_ack`` fires at the
        gateway if the ack survives. Returns False when no route exists right
        now (dead or partitioned target).
        """
        rt = self.nodes.get(target)
        if rt is None:
            raise UnknownUrn(str(target))
        if rt.spec.mobile:
            if not rt.alive:
                return False
            if self._rng.random() < self.params.gprs_loss:
                return True  # lost in flight; sender sees silence, not an error

            def at_mobile() -> None:
                if not rt.alive:
                    return
                self._record("exp-downlink", EXP, gw, target, f"b={len(payload)}")
                self.behavior_input(target, payload)
                if on_ack is not None and self._rng.random() >= self.params.gprs_loss:
                    self.kernel.call_after(self.params.gprs_latency_ms, on_ack)

            self.kernel.call_after(self.params.gprs_latency_ms, at_mobile)
            return True
        hops = self._exp_path(gw, target)
        if hops is None:
            return False

        def arrived() -> None:
            self._record("exp-downlink", EXP, gw, target, f"b={len(payload)}")
            self.behavior_input(target, payload)
            if on_ack is not None:
                back = self._exp_path(target, gw)
                if back is not None:
                    self._walk(target, back, EXP, on_ack)

        self._walk(gw, hops, EXP, arrived)
        return True

    def behavior_input(self, urn: Urn, payload: bytes) -> None:
        """Hand an experiment payload to the node's running program."""
        rt = self.nodes[urn]
        if not rt.alive or rt.behavior is None:
            return
        rt.behavior.on_payload(payload, lambda out: self.node_output(urn, out))

    def node_output(self, urn: Urn, payload: bytes) -> None:
        """Uplink experiment output from a node toward its session anchor."""
        rt = self.nodes.get(urn)
        if rt is None or not rt.alive:
            return
        if rt.spec.mobile or rt.spec.role is NodeRole.PARTICIPATORY:
            self._record("exp-uplink", EXP, urn, "portal", f"b={len(payload)}")
            if self._gprs_exp_tap is not None:
                tap = self._gprs_exp_tap
                self.kernel.call_after(
                    self.params.gprs_latency_ms, lambda: tap(urn, payload)
                )
            return
        gw = rt.spec.cluster
        if gw is None:
            return
        hops = self._exp_path(urn, gw)
        if hops is None:
            self._record("frame-dropped", EXP, urn, gw, "no-route")
            return

        def arrived() -> None:
            self._record("exp-uplink", EXP, urn, gw, f"b={len(payload)}")
            tap = self._exp_uplink_taps.get(gw)
            if tap is not None:
                tap(urn, payload)

        self._walk(urn, hops, EXP, arrived)

    # ------------------------------------------------------------- flashing

    def install_image(self, urn: Urn, image_id: str, behavior_id: str) -> int:
        """Atomic installed-image swap; returns the new per-node version."""
        rt = self.node_rt(urn)
        version = rt.installed.version + 1
        rt.installed = InstalledImage(image_id, version, behavior_id)
        self._record("flash-complete", MGMT, urn, "-", f"{behavior_id}:v{version}")
        self._boot(urn)
        return version

    def installed_image(self, urn: Urn) -> InstalledImage:
        return self.node_rt(urn).installed

    def _boot(self, urn: Urn) -> None:
        rt = self.nodes[urn]
        rt.behavior = make_behavior(rt.installed.behavior_id)
        rt.boots += 1
        rt.behavior.on_boot(rt.installed.version, lambda out: self.node_output(urn, out))

    def motap_broadcast(
        self,
        parent: Urn,
        children: list[Urn],
        payload: object,
        on_deliver: Callable[[Urn, object], None],
    ) -> int:
        """One radio transmission from parent toward its tree children.

        Each child independently hears it subject to link loss; returns the
        number of scheduled deliveries (for frame accounting).
        """
        if not self.is_alive(parent):
            return 0
        sent = 0
        for child in children:
            if not self.is_alive(child):
                continue
            if self._rng.random() < self._link_loss(parent, child):
                continue
            sent += 1

            def deliver(child=child) -> None:
                if self.is_alive(child):
                    on_deliver(child, payload)

            self.kernel.call_after(self.params.hop_latency_ms, deliver)
        return sent

    def gprs_chunk(self, target: Urn, payload: object, on_deliver: Callable[[Urn, object], None]) -> int:
        if not self.is_alive(target):
            return 0
        if self._rng.random() < self.params.gprs_loss:
            return 1

        def deliver() -> None:
            if self.is_alive(target):
                on_deliver(target, payload)

        self.kernel.call_after(self.params.gprs_latency_ms, deliver)
        return 1

    def mesh_tree(self, gw: Urn) -> dict[Urn, Urn]:
        """BFS spanning tree (child -> parent) over the surviving cluster mesh."""
        cluster = self.topology.clusters.get(gw)
        if cluster is None:
            raise UnknownUrn(str(gw))
        adjacency: dict[Urn, list[Urn]] = {}
        for a, b in cluster.mesh_edges:
            adjacency.setdefault(a, []).append(b)
            adjacency.setdefault(b, []).append(a)
        for neighbors in adjacency.values():
            neighbors.sort(key=lambda u: u.node_id)
        parent: dict[Urn, Urn] = {}
        if not self.gateways[gw].alive:
            return parent
        seen = {gw}
        frontier = deque([gw])
        while frontier:
            cur = frontier.popleft()
            for nxt in adjacency.get(cur, []):
                if nxt in seen:
                    continue
                node = self.nodes.get(nxt)
                if node is None or not node.alive:
                    continue
                seen.add(nxt)
                parent[nxt] = cur
                frontier.append(nxt)
        return parent

    # ------------------------------------------------------------- contacts

    def _scan_contacts(self) -> None:
        mobiles = [u for u, rt in self.nodes.items() if rt.spec.mobile and rt.alive]
        fixed = [
            u
            for u, rt in self.nodes.items()
            if not rt.spec.mobile and rt.alive and rt.spec.role is not NodeRole.PARTICIPATORY
        ]
        current: set[tuple[Urn, Urn]] = set()
        for m in mobiles:
            pm = self.position_of(m)
            for f in fixed:
                pf = self.position_of(f)
                if haversine_m(pm.lat, pm.lon, pf.lat, pf.lon) <= self.params.radio_range_m:
                    current.add((m, f))
        for pair in sorted(current - self._contacts):
            self._record("contact-begin", EXP, pair[0], pair[1])
        for pair in sorted(self._contacts - current):
            self._record("contact-end", EXP, pair[0], pair[1])
        self._contacts = current


def _piecewise(points: list[tuple[int, float]], t: int) -> float:
    if t <= points[0][0]:
        return points[0][1]
    for (t0, v0), (t1, v1) in zip(points, points[1:]):
        if t0 <= t <= t1:
            if t1 == t0:
                return v1
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    return points[-1][1]
