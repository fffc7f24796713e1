"""Topology seed files: grammar, parsing and structural validation.

A seed file is line-oriented text; ``#`` starts a comment. Each line is a
record of whitespace-separated ``key=value`` tokens led by a record type:

    world    range=<m> loss=<0..1> latency=<ms> [emission=<ms>] [contact-scan=<ms>]
    gateway  urn=<urn> lat=<deg> lon=<deg> uplink={wired|gprs} [meta=k:v,...]
    node     urn=<urn> role={experimentation|service-only|infrastructural|participatory}
             (lat=<deg> lon=<deg> cluster=<gateway node-id> | route=lat,lon;lat,lon;... speed=<m/s>)
             [sensors=phen:unit[:accuracy],...] [emission=<ms>] [serves={yes|no}]
             [meta=k:v,...] [battery=<pct>]

Fixed nodes belong to exactly one gateway cluster and must be reachable from
their gateway over same-cluster radio links (multi-hop allowed); files with
unreachable members are rejected. Mobile nodes carry a waypoint route and no
cluster. The full grammar is documented in docs/FORMATS.md.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..geo import haversine_m
from ..model import Capability, MalformedUrn, NodeRole, Position, Urn, parse_urn


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class WorldParams:
    radio_range_m: float = 150.0
    loss: float = 0.0
    hop_latency_ms: int = 2
    default_emission_ms: int = 60_000
    contact_scan_ms: int = 0  # 0 disables mobile-contact scanning
    gprs_latency_ms: int = 50
    gprs_loss: float = 0.0

    def validated(self) -> "WorldParams":
        if not (0.0 <= self.loss <= 1.0) or not (0.0 <= self.gprs_loss <= 1.0):
            raise TopologyError("loss must be within [0,1]")
        if self.radio_range_m <= 0:
            raise TopologyError("radio range must be positive")
        if self.hop_latency_ms < 0 or self.gprs_latency_ms < 0:
            raise TopologyError("latency must be >= 0")
        return self


@dataclass(frozen=True)
class Route:
    waypoints: tuple[Position, ...]
    speed_mps: float


@dataclass(frozen=True)
class GatewaySpec:
    urn: Urn
    position: Position
    uplink: str  # wired | gprs
    meta: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class NodeSpec:
    urn: Urn
    role: NodeRole
    location: Union[Position, Route]
    cluster: Optional[Urn]  # gateway urn for fixed mesh nodes
    sensors: tuple[Capability, ...] = ()
    emission_ms: int = 60_000
    serves: bool = True
    meta: dict[str, str] = field(default_factory=dict)
    battery: float = 100.0

    @property
    def mobile(self) -> bool:
        return isinstance(self.location, Route)


@dataclass(frozen=True)
class ClusterTopology:
    gateway: Urn
    members: frozenset[Urn]
    mesh_edges: frozenset[tuple[Urn, Urn]]  # undirected, stored sorted


@dataclass
class Topology:
    params: WorldParams
    gateways: dict[Urn, GatewaySpec]
    nodes: dict[Urn, NodeSpec]
    clusters: dict[Urn, ClusterTopology]
    source: Optional[str] = None

    def cluster_of(self, urn: Urn) -> Optional[Urn]:
        node = self.nodes.get(urn)
        return node.cluster if node else None

    def fixed_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes.values() if not n.mobile]

    def mobile_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes.values() if n.mobile]


def _tokens(line: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in line.split():
        if "=" not in tok:
            raise TopologyError(f"expected key=value, got {tok!r}")
        key, value = tok.split("=", 1)
        if key in out:
            raise TopologyError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _parse_sensors(text: str) -> tuple[Capability, ...]:
    caps = []
    for item in text.split(","):
        if not item:
            continue
        parts = item.split(":")
        if len(parts) == 2:
            caps.append(Capability(parts[0], parts[1]))
        elif len(parts) == 3:
            caps.append(Capability(parts[0], parts[1], float(parts[2])))
        else:
            raise TopologyError(f"bad sensor spec {item!r}")
    return tuple(caps)


def _parse_meta(text: str) -> dict[str, str]:
    meta = {}
    for item in text.split(","):
        if not item:
            continue
        if ":" not in item:
            raise TopologyError(f"bad meta entry {item!r}")
        k, v = item.split(":", 1)
        meta[k] = v
    return meta


def _parse_route(text: str, speed: float) -> Route:
    points = []
    for wp in text.split(";"):
        if not wp:
            continue
        lat, lon = wp.split(",")
        points.append(Position(float(lat), float(lon)))
    if len(points) < 2:
        raise TopologyError("route needs at least two waypoints")
    if speed <= 0:
        raise TopologyError("route speed must be positive")
    return Route(tuple(points), speed)


def parse_topology(text: str, source: Optional[str] = None) -> Topology:
    params = WorldParams()
    gateways: dict[Urn, GatewaySpec] = {}
    nodes: dict[Urn, NodeSpec] = {}
    gw_by_node_id: dict[str, Urn] = {}
    pending_nodes: list[tuple[int, dict[str, str]]] = []

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        try:
            kv = _tokens(rest)
            if kind == "world":
                params = WorldParams(
                    radio_range_m=float(kv.get("range", params.radio_range_m)),
                    loss=float(kv.get("loss", params.loss)),
                    hop_latency_ms=int(kv.get("latency", params.hop_latency_ms)),
                    default_emission_ms=int(kv.get("emission", params.default_emission_ms)),
                    contact_scan_ms=int(kv.get("contact-scan", params.contact_scan_ms)),
                    gprs_latency_ms=int(kv.get("gprs-latency", params.gprs_latency_ms)),
                    gprs_loss=float(kv.get("gprs-loss", params.gprs_loss)),
                ).validated()
            elif kind == "gateway":
                urn = parse_urn(kv["urn"])
                if urn in gateways or urn in nodes:
                    raise TopologyError(f"duplicate urn {urn}")
                gateways[urn] = GatewaySpec(
                    urn=urn,
                    position=Position(float(kv["lat"]), float(kv["lon"])),
                    uplink=kv.get("uplink", "wired"),
                    meta=_parse_meta(kv.get("meta", "")),
                )
                gw_by_node_id[urn.node_id] = urn
                if gateways[urn].uplink not in ("wired", "gprs"):
                    raise TopologyError(f"bad uplink {gateways[urn].uplink!r}")
            elif kind == "node":
                pending_nodes.append((lineno, kv))
            else:
                raise TopologyError(f"unknown record type {kind!r}")
        except TopologyError as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
        except (KeyError, ValueError, MalformedUrn) as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None

    # nodes resolved after all gateways are known, so file order is free
    for lineno, kv in pending_nodes:
        try:
            urn = parse_urn(kv["urn"])
            if urn in nodes or urn in gateways:
                raise TopologyError(f"duplicate urn {urn}")
            role = NodeRole(kv.get("role", "experimentation"))
            sensors = _parse_sensors(kv.get("sensors", ""))
            location: Union[Position, Route]
            cluster: Optional[Urn] = None
            if "route" in kv:
                location = _parse_route(kv["route"], float(kv.get("speed", "0")))
                if "cluster" in kv:
                    raise TopologyError("mobile nodes belong to no cluster")
            else:
                location = Position(float(kv["lat"]), float(kv["lon"]))
                if role is not NodeRole.PARTICIPATORY:
                    cluster_key = kv.get("cluster")
                    if cluster_key is None:
                        raise TopologyError(f"fixed node {urn} needs a cluster")
                    cluster = gw_by_node_id.get(cluster_key)
                    if cluster is None and ":" in cluster_key:
                        cluster = parse_urn(cluster_key)
                    if cluster not in gateways:
                        raise TopologyError(f"unknown cluster {cluster_key!r} for {urn}")
            serves_default = "yes" if sensors else "no"
            nodes[urn] = NodeSpec(
                urn=urn,
                role=role,
                location=location,
                cluster=cluster,
                sensors=sensors,
                emission_ms=int(kv.get("emission", params.default_emission_ms)),
                serves=kv.get("serves", serves_default) == "yes",
                meta=_parse_meta(kv.get("meta", "")),
                battery=float(kv.get("battery", "100")),
            )
        except TopologyError as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
        except (KeyError, ValueError, MalformedUrn) as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None

    topo = Topology(params, gateways, nodes, {}, source)
    topo.clusters = _derive_clusters(topo)
    return topo


def _edge(a: Urn, b: Urn) -> tuple[Urn, Urn]:
    return (a, b) if a.render() <= b.render() else (b, a)


def _derive_clusters(topo: Topology) -> dict[Urn, ClusterTopology]:
    """Compute per-cluster radio links and verify gateway reachability."""
    members: dict[Urn, list[NodeSpec]] = {gw: [] for gw in topo.gateways}
    for node in topo.fixed_nodes():
        if node.cluster is not None:
            members[node.cluster].append(node)
    clusters: dict[Urn, ClusterTopology] = {}
    rng = topo.params.radio_range_m
    for gw_urn, specs in members.items():
        gw = topo.gateways[gw_urn]
        positions: dict[Urn, Position] = {gw_urn: gw.position}
        for spec in specs:
            assert isinstance(spec.location, Position)
            positions[spec.urn] = spec.location
        urns = sorted(positions, key=lambda u: u.render())
        edges: set[tuple[Urn, Urn]] = set()
        for a, b in itertools.combinations(urns, 2):
            pa, pb = positions[a], positions[b]
            if haversine_m(pa.lat, pa.lon, pb.lat, pb.lon) <= rng:
                edges.add(_edge(a, b))
        adjacency: dict[Urn, set[Urn]] = {u: set() for u in urns}
        for a, b in edges:
            adjacency[a].add(b)
            adjacency[b].add(a)
        reached = {gw_urn}
        frontier = deque([gw_urn])
        while frontier:
            cur = frontier.popleft()
            for nxt in adjacency[cur]:
                if nxt not in reached:
                    reached.add(nxt)
                    frontier.append(nxt)
        orphans = sorted(set(urns) - reached, key=lambda u: u.render())
        if orphans:
            raise TopologyError(
                f"orphan nodes unreachable from gateway {gw_urn}: "
                + ", ".join(str(u) for u in orphans)
            )
        clusters[gw_urn] = ClusterTopology(
            gateway=gw_urn,
            members=frozenset(spec.urn for spec in specs),
            mesh_edges=frozenset(edges),
        )
    return clusters


def load_topology(path: Union[str, Path]) -> Topology:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TopologyError(f"cannot read topology {path}: {exc}") from None
    return parse_topology(text, source=str(path))
