"""Blue Lights Road Network: a directed road graph with emergency exemptions.

Input is a GeoJSON ``FeatureCollection``. ``LineString`` features are road
segments between intersections; optional ``Point`` features with a
``node_id`` property declare intersections explicitly, in which case the
segments reference them through ``from_node`` / ``to_node``. Without explicit
references, intersections are inferred from coincident segment endpoints.

Segment properties:

``road_type``
    One of the :class:`RoadType` member names.
``oneway``
    Traffic may only follow the geometry's direction. Without an exemption
    flag the restriction is treated as physical and the reverse link is
    omitted.
``bluelight_contraflow``, ``bus_lane``, ``pedestrian``
    Legal restrictions that emergency vehicles are exempt from (wrong side
    of a keep-left bollard, banned turns, bus lanes, pedestrian precincts).
    On a one-way segment any of them adds the reverse link flagged
    ``civilian_forbidden``. ``pedestrian`` marks both directions
    civilian-forbidden, as does ``bus_lane`` on a two-way (bus-only) road.
``way_id``
    Unique identifier pairing the two directions of a road.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import geo
from .geo import LatLon


class NetworkError(ValueError):
    """Raised when a road network description cannot be turned into a graph."""


class NetworkParseError(NetworkError):
    pass


class RoadType(enum.Enum):
    Motorway = 0
    ARoad = 1
    BRoad = 2
    MinorRoad = 3
    LocalStreet = 4
    PrivatePublic = 5
    PrivateRestricted = 6
    Alley = 7
    PedestrianisedStreet = 8


ROAD_TYPES = tuple(RoadType)

_FLAG_KEYS = ("oneway", "bluelight_contraflow", "bus_lane", "pedestrian")
_NODE_TOL_M = 1.0
_COORD_KEY_DIGITS = 7


@dataclass(frozen=True)
class RoadLink:
    id: int
    from_node: int
    to_node: int
    length: float
    road_type: RoadType
    geometry: tuple[LatLon, ...]
    civilian_forbidden: bool
    source_way: str


@dataclass(frozen=True)
class Way:
    """An undirected source road as read from the input file."""

    way_id: str
    road_type: RoadType
    from_node: int
    to_node: int
    geometry: tuple[LatLon, ...]
    oneway: bool = False
    bluelight_contraflow: bool = False
    bus_lane: bool = False
    pedestrian: bool = False


class _GridIndex:
    """Uniform degree-space grid over link segments."""

    def __init__(self, links: Sequence[RoadLink], ref_lat: float, cell_m: float = 200.0):
        my, mx = geo.metres_per_degree(ref_lat)
        self.cell_lat = cell_m / my
        self.cell_lon = cell_m / mx
        self.cells: dict[tuple[int, int], list[int]] = defaultdict(list)
        for link in links:
            keys = set()
            for (a_lat, a_lon), (b_lat, b_lon) in zip(link.geometry[:-1], link.geometry[1:]):
                i0, i1 = sorted((self._i(a_lat), self._i(b_lat)))
                j0, j1 = sorted((self._j(a_lon), self._j(b_lon)))
                for i in range(i0, i1 + 1):
                    for j in range(j0, j1 + 1):
                        keys.add((i, j))
            for key in keys:
                self.cells[key].append(link.id)

    def _i(self, lat: float) -> int:
        return math.floor(lat / self.cell_lat)

    def _j(self, lon: float) -> int:
        return math.floor(lon / self.cell_lon)

    def candidates(self, bounds) -> set[int]:
        lat_min, lat_max, lon_min, lon_max = bounds
        out: set[int] = set()
        for i in range(self._i(lat_min), self._i(lat_max) + 1):
            for j in range(self._j(lon_min), self._j(lon_max) + 1):
                ids = self.cells.get((i, j))
                if ids:
                    out.update(ids)
        return out


class RoadNetwork:
    """Immutable directed road graph.

    Node and link identifiers are dense integers. ``adjacency[n]`` lists the
    outgoing link ids of node ``n`` in increasing order.
    """

    def __init__(self, node_coords: Sequence[LatLon], links: Sequence[RoadLink],
                 ways: Sequence[Way] = ()):
        self.node_coords: tuple[LatLon, ...] = tuple(tuple(c) for c in node_coords)
        self.links: tuple[RoadLink, ...] = tuple(links)
        self.ways: tuple[Way, ...] = tuple(ways)
        n = len(self.node_coords)
        adj: list[list[int]] = [[] for _ in range(n)]
        for link in self.links:
            adj[link.from_node].append(link.id)
        self.adjacency: tuple[tuple[int, ...], ...] = tuple(tuple(a) for a in adj)

        self.link_from = np.array([l.from_node for l in self.links], dtype=np.int64)
        self.link_to = np.array([l.to_node for l in self.links], dtype=np.int64)
        self.link_length = np.array([l.length for l in self.links], dtype=float)
        self.length_list: list[float] = self.link_length.tolist()
        self.link_type = np.array([l.road_type.value for l in self.links], dtype=np.int64)

        pair: dict[tuple[str, int, int], int] = {}
        for link in self.links:
            pair[(link.source_way, link.from_node, link.to_node)] = link.id
        self._reverse = np.full(len(self.links), -1, dtype=np.int64)
        for link in self.links:
            other = pair.get((link.source_way, link.to_node, link.from_node))
            if other is not None and other != link.id:
                self._reverse[link.id] = other

        ref_lat = float(np.mean([c[0] for c in self.node_coords])) if n else 0.0
        self._index = _GridIndex(self.links, ref_lat)

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def reverse(self, link_id: int) -> int | None:
        """The opposite-direction link of the same source road, if any."""
        r = int(self._reverse[link_id])
        return None if r < 0 else r

    def link_midpoint(self, link_id: int) -> LatLon:
        link = self.links[link_id]
        return geo.interpolate_along(link.geometry, link.length / 2.0)

    def links_in_box(self, center: LatLon, half_side: float) -> set[int]:
        return links_in_box(self, center, half_side)

    def nearest_link(self, point: LatLon) -> tuple[int, float]:
        return nearest_link(self, point)

    def links_within(self, point: LatLon, radius: float) -> list[tuple[int, geo.Projection]]:
        """All links whose projected distance to ``point`` is at most ``radius``.

        Sorted by (distance, link id).
        """
        out = []
        for lid in links_in_box(self, point, radius):
            proj = geo.project_onto_polyline(point, self.links[lid].geometry)
            if proj.distance_m <= radius:
                out.append((lid, proj))
        out.sort(key=lambda item: (item[1].distance_m, item[0]))
        return out


def links_in_box(net: RoadNetwork, center: LatLon, half_side: float) -> set[int]:
    """Links whose geometry intersects the metric square around ``center``."""
    if half_side <= 0:
        raise ValueError("half_side must be positive")
    bounds = geo.box_bounds(center, half_side)
    return {
        lid for lid in net._index.candidates(bounds)
        if geo.polyline_intersects_box(net.links[lid].geometry, bounds)
    }


def nearest_link(net: RoadNetwork, point: LatLon) -> tuple[int, float]:
    """Closest link to ``point`` and its distance in metres; ties go to the smaller id.

    Searches boxes of doubling size. Once the best distance found is within
    the current half-side, every link at that distance or closer must
    intersect the box, so the answer is exact.
    """
    if net.n_links == 0:
        raise NetworkError("network has no links")
    half = 100.0
    while True:
        best: tuple[float, int] | None = None
        for lid in links_in_box(net, point, half):
            d = geo.project_onto_polyline(point, net.links[lid].geometry).distance_m
            if best is None or (d, lid) < best:
                best = (d, lid)
        if best is not None and best[0] <= half:
            return best[1], best[0]
        half *= 2.0
        if half > 4.1e7:
            # far outside the index extent; fall back to a full scan
            d, lid = min((geo.project_onto_polyline(point, l.geometry).distance_m, l.id)
                         for l in net.links)
            return lid, d


# --------------------------------------------------------------------------- build


def _feature_label(i: int, props: dict) -> str:
    way = props.get("way_id")
    return f"feature #{i}" + (f" (way_id={way})" if way is not None else "")


def _as_bool(value, label: str, key: str) -> bool:
    if value is None:
        return False
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) and value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
        return value.lower() in ("true", "yes", "1")
    raise NetworkError(f"{label}: property {key!r} is not a boolean: {value!r}")


def build_network_from_features(features: Iterable[dict]) -> RoadNetwork:
    """Build a network from already-decoded GeoJSON features."""
    features = list(features)
    node_coords: list[LatLon] = []
    explicit: dict[str, int] = {}
    for i, feat in enumerate(features):
        geom = (feat or {}).get("geometry") or {}
        props = (feat or {}).get("properties") or {}
        if geom.get("type") == "Point":
            key = props.get("node_id")
            if key is None:
                raise NetworkError(f"feature #{i}: Point feature without node_id")
            key = str(key)
            if key in explicit:
                raise NetworkError(f"feature #{i}: duplicate node_id {key!r}")
            lon, lat = geom["coordinates"][:2]
            explicit[key] = len(node_coords)
            node_coords.append((float(lat), float(lon)))

    inferred: dict[tuple[float, float], int] = {}

    def endpoint_node(coord: LatLon) -> int:
        key = (round(coord[0], _COORD_KEY_DIGITS), round(coord[1], _COORD_KEY_DIGITS))
        nid = inferred.get(key)
        if nid is None:
            nid = len(node_coords)
            inferred[key] = nid
            node_coords.append(coord)
        return nid

    ways: list[Way] = []
    seen_ways: set[str] = set()
    for i, feat in enumerate(features):
        if not isinstance(feat, dict):
            raise NetworkError(f"feature #{i}: not an object")
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        gtype = geom.get("type")
        if gtype == "Point":
            continue
        label = _feature_label(i, props)
        if gtype != "LineString":
            raise NetworkError(f"{label}: unsupported geometry type {gtype!r}")
        try:
            coords = tuple((float(c[1]), float(c[0])) for c in geom["coordinates"])
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise NetworkError(f"{label}: malformed coordinates ({exc})") from None
        if len(coords) < 2:
            raise NetworkError(f"{label}: LineString needs at least two positions")
        try:
            road_type = RoadType[props.get("road_type")]
        except KeyError:
            raise NetworkError(f"{label}: unknown road_type {props.get('road_type')!r}") from None
        way_id = str(props.get("way_id", f"f{i}"))
        if way_id in seen_ways:
            raise NetworkError(f"{label}: duplicate way_id")
        seen_ways.add(way_id)
        flags = {k: _as_bool(props.get(k), label, k) for k in _FLAG_KEYS}

        ends = []
        for key, coord in (("from_node", coords[0]), ("to_node", coords[-1])):
            ref = props.get(key)
            if ref is None:
                ends.append(endpoint_node(coord))
                continue
            nid = explicit.get(str(ref))
            if nid is None:
                raise NetworkError(f"{label}: {key} references unknown node {ref!r}")
            if geo.distance_m(node_coords[nid], coord) > _NODE_TOL_M:
                raise NetworkError(f"{label}: geometry endpoint does not meet node {ref!r}")
            ends.append(nid)
        if ends[0] == ends[1]:
            raise NetworkError(f"{label}: segment starts and ends at the same node")
        coords = (node_coords[ends[0]],) + coords[1:-1] + (node_coords[ends[1]],)
        if geo.polyline_length_m(coords) <= 0.0:
            raise NetworkError(f"{label}: zero length")
        ways.append(Way(way_id, road_type, ends[0], ends[1], coords, **flags))

    return network_from_ways(node_coords, ways)


def network_from_ways(node_coords: Sequence[LatLon], ways: Sequence[Way]) -> RoadNetwork:
    links: list[RoadLink] = []
    for w in ways:
        length = geo.polyline_length_m(w.geometry)
        if not length > 0.0:
            raise NetworkError(f"way {w.way_id}: non-positive length {length}")
        exempt = w.bluelight_contraflow or w.bus_lane or w.pedestrian
        if w.oneway:
            fwd_forbidden = w.pedestrian
            add_reverse = exempt
        else:
            fwd_forbidden = w.pedestrian or w.bus_lane
            add_reverse = True
        rev_forbidden = fwd_forbidden or w.oneway
        links.append(RoadLink(len(links), w.from_node, w.to_node, length, w.road_type,
                              w.geometry, fwd_forbidden, w.way_id))
        if add_reverse:
            links.append(RoadLink(len(links), w.to_node, w.from_node, length, w.road_type,
                                  tuple(reversed(w.geometry)), rev_forbidden, w.way_id))
    return RoadNetwork(node_coords, links, ways)


def build_network(source) -> RoadNetwork:
    """Read a GeoJSON road network file (path or text stream) into a graph."""
    if hasattr(source, "read"):
        text = source.read()
        name = getattr(source, "name", "<stream>")
    else:
        text = Path(source).read_text(encoding="utf-8")
        name = str(source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"{name}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("features"), list):
        raise NetworkParseError(f"{name}: expected a FeatureCollection with a features list")
    return build_network_from_features(doc["features"])


# --------------------------------------------------------------------------- output

DUMP_HEADER = ("link_id", "from", "to", "length_m", "road_type", "civilian_forbidden", "way_id")


def dump_csv(net: RoadNetwork) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DUMP_HEADER)
    for l in net.links:
        w.writerow([l.id, l.from_node, l.to_node, f"{l.length:.6f}", l.road_type.name,
                    int(l.civilian_forbidden), l.source_way])
    return buf.getvalue()


def to_geojson(net: RoadNetwork) -> dict:
    """Serialise a network back into the input format (explicit nodes)."""
    feats = []
    for nid, (lat, lon) in enumerate(net.node_coords):
        feats.append({"type": "Feature",
                      "geometry": {"type": "Point", "coordinates": [lon, lat]},
                      "properties": {"node_id": str(nid)}})
    for w in net.ways:
        feats.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [[lon, lat] for lat, lon in w.geometry]},
            "properties": {
                "way_id": w.way_id, "road_type": w.road_type.name,
                "from_node": str(w.from_node), "to_node": str(w.to_node),
                "oneway": w.oneway, "bluelight_contraflow": w.bluelight_contraflow,
                "bus_lane": w.bus_lane, "pedestrian": w.pedestrian,
            },
        })
    return {"type": "FeatureCollection", "features": feats}


def write_geojson(net: RoadNetwork) -> str:
    return json.dumps(to_geojson(net), separators=(",", ":"), sort_keys=True) + "\n"
