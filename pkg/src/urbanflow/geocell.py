"""Hexagonal spatial indexing over a local planar projection.

Coordinates are projected with the equirectangular approximation around a
configured origin, then mapped onto a flat-top hexagonal grid in axial (q, r)
coordinates. The approximation is accurate to well under a metre at city
extents, which is all the grid resolution requires.

Cell centers in meters, for circumradius R:

    x = R * 3/2 * q
    y = R * sqrt(3) * (r + q / 2)

Point-to-cell inverts that fractionally and rounds in cube coordinates,
fixing up the component with the largest rounding error so q + r + s == 0
holds. Within one grid every point maps to exactly one cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_M = 6_371_000.0

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class GridConfig:
    origin_latitude: float
    origin_longitude: float
    hex_circumradius_m: float = 500.0

    def __post_init__(self):
        if self.hex_circumradius_m <= 0:
            raise ValueError("hex_circumradius_m must be positive")
        if not (-90.0 <= self.origin_latitude <= 90.0):
            raise ValueError("origin_latitude out of range")
        if not (-180.0 <= self.origin_longitude <= 180.0):
            raise ValueError("origin_longitude out of range")


@dataclass(frozen=True, order=True)
class CellId:
    q: int
    r: int

    def key(self) -> str:
        return f"{self.q}:{self.r}"

    @classmethod
    def parse(cls, text: str) -> "CellId":
        q_str, _, r_str = text.partition(":")
        return cls(int(q_str), int(r_str))


def project(latitude: float, longitude: float, cfg: GridConfig) -> tuple[float, float]:
    """Lat/lon degrees to planar meters east/north of the grid origin."""
    k = math.pi / 180.0 * EARTH_RADIUS_M
    x = (longitude - cfg.origin_longitude) * math.cos(math.radians(cfg.origin_latitude)) * k
    y = (latitude - cfg.origin_latitude) * k
    return x, y


def unproject(x: float, y: float, cfg: GridConfig) -> tuple[float, float]:
    k = math.pi / 180.0 * EARTH_RADIUS_M
    latitude = cfg.origin_latitude + y / k
    longitude = cfg.origin_longitude + x / (k * math.cos(math.radians(cfg.origin_latitude)))
    return latitude, longitude


def cell_center(cell: CellId, cfg: GridConfig) -> tuple[float, float]:
    radius = cfg.hex_circumradius_m
    x = radius * 1.5 * cell.q
    y = radius * _SQRT3 * (cell.r + cell.q / 2.0)
    return x, y


def cell_center_latlon(cell: CellId, cfg: GridConfig) -> tuple[float, float]:
    x, y = cell_center(cell, cfg)
    return unproject(x, y, cfg)


def point_to_cell(x: float, y: float, cfg: GridConfig) -> CellId:
    radius = cfg.hex_circumradius_m
    q_frac = (2.0 / 3.0) * x / radius
    r_frac = (-x / 3.0 + _SQRT3 / 3.0 * y) / radius
    return _cube_round(q_frac, r_frac)


def latlon_to_cell(latitude: float, longitude: float, cfg: GridConfig) -> CellId:
    x, y = project(latitude, longitude, cfg)
    return point_to_cell(x, y, cfg)


def neighbors(cell: CellId) -> list[CellId]:
    q, r = cell.q, cell.r
    return [CellId(q + 1, r), CellId(q + 1, r - 1), CellId(q, r - 1),
            CellId(q - 1, r), CellId(q - 1, r + 1), CellId(q, r + 1)]


def _cube_round(q_frac: float, r_frac: float) -> CellId:
    x_frac, z_frac = q_frac, r_frac
    y_frac = -x_frac - z_frac
    x = round(x_frac)
    y = round(y_frac)
    z = round(z_frac)
    dx = abs(x - x_frac)
    dy = abs(y - y_frac)
    dz = abs(z - z_frac)
    if dx > dy and dx > dz:
        x = -y - z
    elif dy > dz:
        y = -x - z
    else:
        z = -x - y
    return CellId(int(x), int(z))
