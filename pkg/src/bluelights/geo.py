"""Small spherical-geometry toolkit.

Coordinates are ``(lat, lon)`` tuples in WGS84 degrees. Metric work uses an
equirectangular projection about a reference latitude, which is accurate to
well under 0.1% over city-scale distances.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

EARTH_RADIUS_M = 6371008.8
METRES_PER_MILE = 1609.344
MPS_PER_MPH = METRES_PER_MILE / 3600.0

LatLon = tuple[float, float]


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres. Works on scalars or numpy arrays."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def distance_m(a: LatLon, b: LatLon) -> float:
    return float(haversine_m(a[0], a[1], b[0], b[1]))


def polyline_length_m(coords: Sequence[LatLon]) -> float:
    arr = np.asarray(coords, dtype=float)
    if len(arr) < 2:
        return 0.0
    return float(np.sum(haversine_m(arr[:-1, 0], arr[:-1, 1], arr[1:, 0], arr[1:, 1])))


def metres_per_degree(lat: float) -> tuple[float, float]:
    """(metres per degree latitude, metres per degree longitude) at ``lat``."""
    k = EARTH_RADIUS_M * math.pi / 180.0
    return k, k * math.cos(math.radians(lat))


def box_bounds(center: LatLon, half_side_m: float) -> tuple[float, float, float, float]:
    """Degree bounds ``(lat_min, lat_max, lon_min, lon_max)`` of a metric square.

    The square is axis-aligned in the equirectangular projection about the
    centre latitude; since that projection is affine in (lat, lon), the square
    is also an axis-aligned box in degree space.
    """
    my, mx = metres_per_degree(center[0])
    dlat = half_side_m / my
    dlon = half_side_m / mx
    return center[0] - dlat, center[0] + dlat, center[1] - dlon, center[1] + dlon


def offset_point(origin: LatLon, east_m: float, north_m: float) -> LatLon:
    my, mx = metres_per_degree(origin[0])
    return origin[0] + north_m / my, origin[1] + east_m / mx


def segment_intersects_box(
    lat1: float, lon1: float, lat2: float, lon2: float,
    lat_min: float, lat_max: float, lon_min: float, lon_max: float,
) -> bool:
    """Liang-Barsky clip of one segment against a closed degree-space box."""
    t0, t1 = 0.0, 1.0
    dx = lon2 - lon1
    dy = lat2 - lat1
    for p, q in (
        (-dx, lon1 - lon_min),
        (dx, lon_max - lon1),
        (-dy, lat1 - lat_min),
        (dy, lat_max - lat1),
    ):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return False
            if r > t0:
                t0 = r
        else:
            if r < t0:
                return False
            if r < t1:
                t1 = r
    return t0 <= t1


def polyline_intersects_box(coords: Sequence[LatLon], bounds) -> bool:
    lat_min, lat_max, lon_min, lon_max = bounds
    for (a_lat, a_lon), (b_lat, b_lon) in zip(coords[:-1], coords[1:]):
        if segment_intersects_box(a_lat, a_lon, b_lat, b_lon, lat_min, lat_max, lon_min, lon_max):
            return True
    return False


class Projection(NamedTuple):
    distance_m: float     # point-to-polyline distance in the local projection
    offset_m: float       # geodesic distance along the polyline to the foot point
    point: LatLon         # the foot point


def project_onto_polyline(point: LatLon, coords: Sequence[LatLon]) -> Projection:
    """Perpendicular foot of ``point`` on a polyline.

    Distances are measured in the equirectangular frame about the query
    latitude; the along-line offset is accumulated with haversine segment
    lengths so that it is consistent with link lengths.
    """
    my, mx = metres_per_degree(point[0])
    px = point[1] * mx
    py = point[0] * my
    best = None
    along = 0.0
    for (a_lat, a_lon), (b_lat, b_lon) in zip(coords[:-1], coords[1:]):
        ax, ay = a_lon * mx, a_lat * my
        bx, by = b_lon * mx, b_lat * my
        vx, vy = bx - ax, by - ay
        seg2 = vx * vx + vy * vy
        if seg2 > 0.0:
            t = ((px - ax) * vx + (py - ay) * vy) / seg2
            t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
        else:
            t = 0.0
        fx, fy = ax + t * vx, ay + t * vy
        d = math.hypot(px - fx, py - fy)
        seg_len = float(haversine_m(a_lat, a_lon, b_lat, b_lon))
        if best is None or d < best[0]:
            foot = (a_lat + t * (b_lat - a_lat), a_lon + t * (b_lon - a_lon))
            best = (d, along + t * seg_len, foot)
        along += seg_len
    assert best is not None
    return Projection(*best)


def interpolate_along(coords: Sequence[LatLon], offset_m: float) -> LatLon:
    """Point at geodesic distance ``offset_m`` from the start of a polyline."""
    remaining = offset_m
    for (a_lat, a_lon), (b_lat, b_lon) in zip(coords[:-1], coords[1:]):
        seg = float(haversine_m(a_lat, a_lon, b_lat, b_lon))
        if remaining <= seg and seg > 0.0:
            t = remaining / seg
            return a_lat + t * (b_lat - a_lat), a_lon + t * (b_lon - a_lon)
        remaining -= seg
    return tuple(coords[-1])


def bearing_deg(a: LatLon, b: LatLon) -> float:
    """Initial compass bearing from ``a`` to ``b`` in [0, 360)."""
    p1, p2 = math.radians(a[0]), math.radians(b[0])
    dl = math.radians(b[1] - a[1])
    y = math.sin(dl) * math.cos(p2)
    x = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)
    return math.degrees(math.atan2(y, x)) % 360.0


def midpoint(a: LatLon, b: LatLon) -> LatLon:
    """Geographic midpoint of two positions on the sphere."""
    p1, l1 = math.radians(a[0]), math.radians(a[1])
    p2, l2 = math.radians(b[0]), math.radians(b[1])
    bx = math.cos(p2) * math.cos(l2 - l1)
    by = math.cos(p2) * math.sin(l2 - l1)
    p3 = math.atan2(math.sin(p1) + math.sin(p2), math.hypot(math.cos(p1) + bx, by))
    l3 = l1 + math.atan2(by, math.cos(p1) + bx)
    return math.degrees(p3), (math.degrees(l3) + 540.0) % 360.0 - 180.0
