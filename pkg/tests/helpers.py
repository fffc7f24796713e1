"""Shared helpers for building small topologies in tests."""

from __future__ import annotations

import math

ORIGIN_LAT = 43.4620
ORIGIN_LON = -3.8100
_M_PER_DEG_LAT = math.pi * 6371_000.0 / 180.0


def at_m(x_m: float, y_m: float) -> tuple[float, float]:
    """lat/lon of a point x meters east, y meters north of the origin."""
    lat = ORIGIN_LAT + y_m / _M_PER_DEG_LAT
    lon = ORIGIN_LON + x_m / (_M_PER_DEG_LAT * math.cos(math.radians(ORIGIN_LAT)))
    return lat, lon


def urn(node_id: str) -> str:
    return f"urn:citytb:testbed:{node_id}"


def gateway_line(node_id: str, x_m: float, y_m: float, uplink: str = "wired") -> str:
    lat, lon = at_m(x_m, y_m)
    return f"gateway urn={urn(node_id)} lat={lat:.7f} lon={lon:.7f} uplink={uplink}"


def node_line(
    node_id: str,
    x_m: float,
    y_m: float,
    cluster: str,
    role: str = "experimentation",
    sensors: str = "temperature:celsius",
    emission: int = 60_000,
    extra: str = "",
) -> str:
    lat, lon = at_m(x_m, y_m)
    line = (
        f"node urn={urn(node_id)} role={role} lat={lat:.7f} lon={lon:.7f} "
        f"cluster={cluster} emission={emission}"
    )
    if sensors:
        line += f" sensors={sensors}"
    if extra:
        line += f" {extra}"
    return line


def mobile_line(
    node_id: str,
    waypoints_m: list[tuple[float, float]],
    speed: float,
    sensors: str = "no2:ppb,temperature:celsius",
    emission: int = 60_000,
    extra: str = "",
) -> str:
    wps = ";".join(f"{at_m(x, y)[0]:.7f},{at_m(x, y)[1]:.7f}" for x, y in waypoints_m)
    line = f"node urn={urn(node_id)} role=experimentation route={wps} speed={speed} emission={emission}"
    if sensors:
        line += f" sensors={sensors}"
    if extra:
        line += f" {extra}"
    return line
