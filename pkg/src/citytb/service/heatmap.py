"""Inverse-distance-weighted interpolation of point readings onto a grid.

Power 2, cutoff 250 m by default; grid cells with no sensor inside the cutoff
are reported as no-data (None). This is the one numeric kernel in the system,
so it runs on numpy.
"""

from __future__ import annotations

import numpy as np

from ..model import Observation


class NoData(ValueError):
    pass


_EARTH_R = 6371_000.0


def _haversine_grid(lat1: np.ndarray, lon1: np.ndarray, lat2: float, lon2: float) -> np.ndarray:
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2 - lon1)
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * _EARTH_R * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def heatmap_grid(
    observations: list[Observation],
    bbox: tuple[float, float, float, float],  # min_lat, min_lon, max_lat, max_lon
    cells_x: int,
    cells_y: int,
    power: float = 2.0,
    cutoff_m: float = 250.0,
) -> dict:
    """IDW surface over cell centers; exact hit takes the sensor's value."""
    if not observations:
        raise NoData("no observations to interpolate")
    if cells_x <= 0 or cells_y <= 0:
        raise ValueError("grid must have positive dimensions")
    min_lat, min_lon, max_lat, max_lon = bbox
    lat_step = (max_lat - min_lat) / cells_y
    lon_step = (max_lon - min_lon) / cells_x
    cell_lats = min_lat + (np.arange(cells_y) + 0.5) * lat_step
    cell_lons = min_lon + (np.arange(cells_x) + 0.5) * lon_step
    grid_lat, grid_lon = np.meshgrid(cell_lats, cell_lons, indexing="ij")

    weights_sum = np.zeros((cells_y, cells_x))
    weighted_values = np.zeros((cells_y, cells_x))
    exact = np.full((cells_y, cells_x), np.nan)
    for obs in observations:
        dist = _haversine_grid(grid_lat, grid_lon, obs.position.lat, obs.position.lon)
        hit = dist < 1e-9
        exact[hit] = obs.value
        inside = (dist <= cutoff_m) & ~hit
        w = np.zeros_like(dist)
        w[inside] = 1.0 / np.power(dist[inside], power)
        weights_sum += w
        weighted_values += w * obs.value

    cells: list[list[float | None]] = []
    for yi in range(cells_y):
        row: list[float | None] = []
        for xi in range(cells_x):
            if not np.isnan(exact[yi, xi]):
                row.append(float(exact[yi, xi]))
            elif weights_sum[yi, xi] > 0.0:
                row.append(float(weighted_values[yi, xi] / weights_sum[yi, xi]))
            else:
                row.append(None)
        cells.append(row)
    return {
        "bbox": list(bbox),
        "cells-x": cells_x,
        "cells-y": cells_y,
        "power": power,
        "cutoff-m": cutoff_m,
        "sensors": len(observations),
        "cells": cells,
    }
