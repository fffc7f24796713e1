#!/usr/bin/env python3
"""Deterministically (re)generate the bundled topology seeds.

Run from the repo root:  python3 tools/gen_topo.py
Outputs land in src/citytb/seeds/. Committed outputs are canonical; this
script exists so they can be rebuilt or rescaled.
"""

from __future__ import annotations

import math
import random
import sys
from pathlib import Path

SEEDS = Path(__file__).resolve().parents[1] / "src" / "citytb" / "seeds"

ORIGIN_LAT = 43.4623
ORIGIN_LON = -3.8090
M_PER_DEG_LAT = math.pi * 6371_000.0 / 180.0
M_PER_DEG_LON = M_PER_DEG_LAT * math.cos(math.radians(ORIGIN_LAT))


def at_m(x: float, y: float) -> tuple[float, float]:
    return ORIGIN_LAT + y / M_PER_DEG_LAT, ORIGIN_LON + x / M_PER_DEG_LON


def urn(node_id: str) -> str:
    return f"urn:citytb:santander:{node_id}"


def gw_line(node_id: str, x: float, y: float, uplink: str, meta: str) -> str:
    lat, lon = at_m(x, y)
    return f"gateway urn={urn(node_id)} lat={lat:.7f} lon={lon:.7f} uplink={uplink} meta={meta}"


def node_line(node_id: str, x: float, y: float, cluster: str, role: str,
              sensors: str, meta: str, emission: int = 60000, serves: str = "") -> str:
    lat, lon = at_m(x, y)
    line = (f"node urn={urn(node_id)} role={role} lat={lat:.7f} lon={lon:.7f} "
            f"cluster={cluster} emission={emission}")
    if sensors:
        line += f" sensors={sensors}"
    if serves:
        line += f" serves={serves}"
    line += f" meta={meta}"
    return line


def scatter(rng: random.Random, anchors: list[tuple[float, float]], max_leash: float) -> tuple[float, float]:
    """Place a point within radio reach of an already-placed anchor."""
    ax, ay = rng.choice(anchors)
    radius = rng.uniform(25.0, max_leash)
    angle = rng.uniform(0.0, 2 * math.pi)
    return ax + radius * math.cos(angle), ay + radius * math.sin(angle)


def build_santander() -> str:
    rng = random.Random(20130201)
    lines = [
        "# city-scale seed: 740 fixed points of presence, 390 parking bays,",
        "# 23 gateways, 150 vehicle nodes, 48 irrigation nodes",
        "world range=150 loss=0 latency=2 emission=60000",
    ]
    # 20 city gateways on a 5x4 grid (~250 m pitch), 3 park gateways further out
    city_gws: list[tuple[str, float, float]] = []
    for i in range(20):
        gx, gy = (i % 5) * 260.0, (i // 5) * 260.0
        name = f"gw{i + 1:02d}"
        city_gws.append((name, gx, gy))
        uplink = "wired" if i % 4 else "gprs"  # a few rely on cellular backhaul
        lines.append(gw_line(name, gx, gy, uplink, "deployment:gateway"))
    park_gws: list[tuple[str, float, float]] = []
    for i in range(3):
        gx, gy = 1700.0 + i * 320.0, 900.0
        name = f"gw{21 + i:02d}"
        park_gws.append((name, gx, gy))
        lines.append(gw_line(name, gx, gy, "wired", "deployment:gateway"))

    # sensor bundles for the 680 sensored points of presence
    bundles = (
        [("temperature:celsius:0.5,light:lux:10", 500)]
        + [("temperature:celsius:0.5", 100)]
        + [("noise:dba:2", 50)]
        + [("co:ppm:0.1", 30)]
    )
    pop_sensors: list[str] = []
    for sensors, count in bundles:
        pop_sensors += [sensors] * count
    rng.shuffle(pop_sensors)

    anchors_by_gw: dict[str, list[tuple[float, float]]] = {
        name: [(gx, gy)] for name, gx, gy in city_gws + park_gws
    }

    def place(cluster: str, leash: float = 135.0) -> tuple[float, float]:
        pos = scatter(rng, anchors_by_gw[cluster], leash)
        anchors_by_gw[cluster].append(pos)
        return pos

    # 680 sensored + 60 repeater points of presence over the 20 city clusters
    for i, sensors in enumerate(pop_sensors):
        cluster = city_gws[i % 20][0]
        x, y = place(cluster)
        lines.append(
            node_line(f"pop{i + 1:04d}", x, y, cluster, "experimentation", sensors,
                      "deployment:pop")
        )
    for i in range(60):
        cluster = city_gws[i % 20][0]
        x, y = place(cluster)
        lines.append(
            node_line(f"rpt{i + 1:04d}", x, y, cluster, "infrastructural", "",
                      "deployment:pop")
        )
    # 390 buried parking sensors, service plane only
    for i in range(390):
        cluster = city_gws[i % 20][0]
        x, y = place(cluster)
        lines.append(
            node_line(f"park{i + 1:04d}", x, y, cluster, "service-only",
                      "car-presence:bool", "deployment:parking")
        )
    # 48 irrigation nodes across the 3 park clusters
    irrigation_bundles = (
        [("temperature:celsius:0.3,relative-humidity:pct:2", 21)]
        + [("soil-moisture-tension:centibar:1,soil-temperature:celsius:0.3", 21)]
        + [(
            "temperature:celsius:0.3,relative-humidity:pct:2,solar-radiation:wm2:5,"
            "atmospheric-pressure:hpa:1,wind-speed:mps:0.5,rainfall:mm:0.2",
            4,
        )]
        + [("water-flow:lps:0.1", 2)]
    )
    irr_sensors: list[str] = []
    for sensors, count in irrigation_bundles:
        irr_sensors += [sensors] * count
    for i, sensors in enumerate(irr_sensors):
        cluster = park_gws[i % 3][0]
        x, y = place(cluster)
        lines.append(
            node_line(f"irr{i + 1:02d}", x, y, cluster, "experimentation", sensors,
                      "deployment:irrigation")
        )
    # 150 vehicle nodes on waypoint loops through the city
    mobile_sensors = (
        "no2:ppb:2,co:ppm:0.1,o3:ppb:2,particles:ugm3:1,"
        "temperature:celsius:0.5,relative-humidity:pct:2"
    )
    for i in range(150):
        waypoints = []
        for _ in range(rng.randrange(4, 7)):
            wx, wy = rng.uniform(-150, 1500), rng.uniform(-150, 1000)
            lat, lon = at_m(wx, wy)
            waypoints.append(f"{lat:.7f},{lon:.7f}")
        speed = round(rng.uniform(5.0, 12.0), 1)
        lines.append(
            f"node urn={urn(f'mob{i + 1:03d}')} role=experimentation "
            f"route={';'.join(waypoints)} speed={speed} emission=60000 "
            f"sensors={mobile_sensors} meta=deployment:mobile"
        )
    return "\n".join(lines) + "\n"


def build_small() -> str:
    rng = random.Random(7)
    lines = [
        "# two-cluster bed for choreography and lifecycle tests: 2 GWs, 20 nodes",
        "world range=150 loss=0 latency=2 emission=60000",
        gw_line("gw01", 0.0, 0.0, "wired", "deployment:gateway"),
        gw_line("gw02", 900.0, 0.0, "wired", "deployment:gateway"),
    ]
    anchors = {"gw01": [(0.0, 0.0)], "gw02": [(900.0, 0.0)]}
    for i in range(20):
        cluster = "gw01" if i < 10 else "gw02"
        pos = scatter(rng, anchors[cluster], 135.0)
        anchors[cluster].append(pos)
        lines.append(
            node_line(f"n{i + 1:02d}", pos[0], pos[1], cluster, "experimentation",
                      "temperature:celsius:0.5,light:lux:10", "deployment:pop")
        )
    return "\n".join(lines) + "\n"


def build_minimal() -> str:
    return "\n".join(
        [
            "# smallest world: one gateway, one node",
            "world range=150 loss=0 latency=2",
            gw_line("gw01", 0.0, 0.0, "wired", "deployment:gateway"),
            node_line("n01", 60.0, 0.0, "gw01", "experimentation",
                      "temperature:celsius:0.5", "deployment:pop"),
        ]
    ) + "\n"


def build_mixed() -> str:
    return "\n".join(
        [
            "# role variety: experimentation, service-only, repeater, vehicle",
            "world range=150 loss=0 latency=2 contact-scan=5000",
            gw_line("gw01", 0.0, 0.0, "wired", "deployment:gateway"),
            node_line("exp01", 80.0, 0.0, "gw01", "experimentation",
                      "temperature:celsius:0.5", "deployment:pop"),
            node_line("rpt01", 0.0, 90.0, "gw01", "infrastructural", "", "deployment:pop"),
            node_line("park01", 70.0, 110.0, "gw01", "service-only",
                      "car-presence:bool", "deployment:parking"),
            f"node urn={urn('mob01')} role=experimentation "
            f"route=43.4623000,-3.8090000;43.4650000,-3.8090000 speed=8.0 "
            f"emission=60000 sensors=no2:ppb:2,temperature:celsius:0.5 meta=deployment:mobile",
        ]
    ) + "\n"


def build_park() -> str:
    lines = [
        "# irrigation park: 1 gateway, 6 agricultural nodes, 10 min reporting",
        "world range=150 loss=0 latency=2 emission=600000",
        gw_line("gw21", 0.0, 0.0, "wired", "deployment:gateway"),
    ]
    sensors = "soil-moisture-tension:centibar:1,soil-temperature:celsius:0.3"
    weather = ("temperature:celsius:0.3,relative-humidity:pct:2,"
               "solar-radiation:wm2:5,rainfall:mm:0.2")
    positions = [(70, 0), (140, 30), (60, 110), (-80, 40), (-60, -90), (120, -60)]
    for i, (x, y) in enumerate(positions):
        bundle = sensors if i < 5 else weather
        lines.append(
            node_line(f"irr{i + 1:02d}", float(x), float(y), "gw21", "experimentation",
                      bundle, "deployment:irrigation", emission=600000)
        )
    return "\n".join(lines) + "\n"


def build_motap50(loss: float) -> str:
    lines = [
        f"# flash-protocol bed: 50-node mesh, gateway eccentricity 6, loss {loss}",
        f"world range=120 loss={loss} latency=10 emission=60000",
        gw_line("gw01", 0.0, 0.0, "wired", "deployment:gateway"),
    ]
    for i in range(5):  # relay chain r1..r5 at 100 m pitch
        lines.append(
            node_line(f"r{i + 1:02d}", (i + 1) * 100.0, 0.0, "gw01", "experimentation",
                      "temperature:celsius:0.5", "deployment:pop")
        )
    for i in range(45):  # leaf shell reachable only through r05
        y = -55.0 + i * (110.0 / 44.0)
        lines.append(
            node_line(f"x{i + 1:02d}", 600.0, y, "gw01", "experimentation",
                      "temperature:celsius:0.5", "deployment:pop")
        )
    return "\n".join(lines) + "\n"


def main() -> int:
    SEEDS.mkdir(parents=True, exist_ok=True)
    outputs = {
        "santander.topo": build_santander(),
        "small.topo": build_small(),
        "minimal.topo": build_minimal(),
        "mixed.topo": build_mixed(),
        "park.topo": build_park(),
        "motap50.topo": build_motap50(0.0),
    }
    for name, text in outputs.items():
        (SEEDS / name).write_text(text, encoding="utf-8")
        print(f"wrote {SEEDS / name} ({len(text.splitlines())} lines)")
    # sanity: the seeds must parse and be fully connected
    sys.path.insert(0, str(SEEDS.parents[2]))
    from citytb.sim.topology import load_topology

    for name in outputs:
        topo = load_topology(SEEDS / name)
        print(f"  {name}: {len(topo.gateways)} gateways, {len(topo.nodes)} nodes")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
