"""Route selection and arrival-time estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Sequence

import numpy as np

from . import geo
from .geo import LatLon, MPS_PER_MPH
from .ingest import VehicleClass
from .network import RoadNetwork
from .paths import Endpoint, NoRouteError, lexicographic_shortest
from .speeds import Metric, SpeedModel, SpeedTable, _table_for, link_speeds

SNAP_LIMIT_M = 250.0
NODE_SNAP_TOL_M = 1e-3

BIAS_SLOPE = 0.8029
BIAS_OFFSET_S = 23.3843


class RoutingError(RuntimeError):
    pass


class SnapError(RoutingError):
    def __init__(self, which: str, point: LatLon, distance: float):
        super().__init__(f"{which} {point} is {distance:.1f} m from the nearest link "
                         f"(limit {SNAP_LIMIT_M:.0f} m)")
        self.distance = distance


class NoRoute(RoutingError):
    pass


@dataclass(frozen=True)
class RouteRequest:
    origin: LatLon
    destination: LatLon
    vehicle: VehicleClass
    departure: datetime
    metric: Metric = Metric.V
    # "LAS", "NelderMead" or a SpeedTable; None picks LAS for Metric II and
    # the model's calibrated table for HYBRID
    speed_set: str | SpeedTable | None = None


@dataclass
class RoutePrediction:
    links: tuple[int, ...]
    distance: float
    t_beta: float
    t_chi: float
    link_times: tuple[float, ...]
    metric: Metric
    junctions: int
    provenance: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "links": list(self.links),
            "distance_m": self.distance,
            "t_beta_s": self.t_beta,
            "t_chi_s": self.t_chi,
            "junctions": self.junctions,
            "metric": self.metric.value,
            "provenance": dict(sorted(self.provenance.items())),
        }


def bias_correct(t_beta: float) -> float:
    """Undo the systematic underestimate of link-summed journey times."""
    if t_beta < 0:
        raise ValueError("t_beta must be non-negative")
    return max(0.0, t_beta / BIAS_SLOPE - BIAS_OFFSET_S)


def seconds(length_m, mph):
    return length_m / (mph * MPS_PER_MPH)


@dataclass(frozen=True)
class _Snap:
    link: int
    offset: float


def _snap(net: RoadNetwork, point: LatLon, which: str = "point") -> list[_Snap]:
    """Nearest link plus its opposite-direction twin (same geometry)."""
    lid, d = net.nearest_link(point)
    if d > SNAP_LIMIT_M:
        raise SnapError(which, point, d)
    proj = geo.project_onto_polyline(point, net.links[lid].geometry)
    out = [_Snap(lid, proj.offset_m)]
    twin = net.reverse(lid)
    if twin is not None:
        out.append(_Snap(twin, max(0.0, net.links[lid].length - proj.offset_m)))
    return out


def _terminals(net, snaps: Sequence[_Snap], travel, delay: float, is_origin: bool):
    """Search endpoints for an origin or destination snap."""
    out = []
    for s in snaps:
        link = net.links[s.link]
        if s.offset <= NODE_SNAP_TOL_M:
            out.append(Endpoint(link.from_node))
        elif s.offset >= link.length - NODE_SNAP_TOL_M:
            out.append(Endpoint(link.to_node))
        elif is_origin:
            frac = 1.0 - s.offset / link.length
            out.append(Endpoint(link.to_node, frac * travel[s.link] + delay, (s.link,)))
        else:
            frac = s.offset / link.length
            out.append(Endpoint(link.from_node, frac * travel[s.link] + delay, (s.link,)))
    return out


def _fractions(net, links: Sequence[int], origin: Sequence[_Snap], dest: Sequence[_Snap]):
    """Covered fraction of each route link (partial at the ends)."""
    def interior(s: _Snap) -> bool:
        return NODE_SNAP_TOL_M < s.offset < net.links[s.link].length - NODE_SNAP_TOL_M

    fr = [1.0] * len(links)
    start = {s.link: s.offset for s in origin if interior(s)}
    end = {s.link: s.offset for s in dest if interior(s)}
    n = len(links)
    for i in sorted({0, n - 1} if n else set()):
        L = net.links[links[i]].length
        a = start.get(links[i], 0.0) if i == 0 else 0.0
        b = end.get(links[i], L) if i == n - 1 else L
        fr[i] = (b - a) / L
    return fr


def _metric_setup(model: SpeedModel, request: RouteRequest, net: RoadNetwork):
    """Per-link speeds, the junction delay and provenance for a selection metric."""
    metric = Metric(request.metric)
    if metric is Metric.II:
        table = _table_for(model, request.speed_set)
        speeds, tags = link_speeds(model, Metric.II, net, request.vehicle, request.departure, table)
        return speeds, table.junction_delay, tags
    speeds, tags = link_speeds(model, metric, net, request.vehicle, request.departure)
    return speeds, 0.0, tags


def _route_times(net, links, fractions, speeds) -> tuple[tuple[float, ...], float]:
    times = tuple(float(seconds(net.links[l].length, speeds[l])) * f for l, f in zip(links, fractions))
    dist = sum(net.links[l].length * f for l, f in zip(links, fractions))
    return times, dist


def _select(net, speeds: np.ndarray, delay: float, request: RouteRequest):
    origin = _snap(net, request.origin, "origin")
    dest = _snap(net, request.destination, "destination")
    return select_between(net, speeds, delay, origin, dest)


def select_between(net, speeds: np.ndarray, delay: float, origin: Sequence[_Snap],
                   dest: Sequence[_Snap]) -> tuple[tuple[int, ...], list[float]]:
    """Minimum-cost link sequence between snapped endpoints, with covered fractions."""
    travel = (net.link_length / (speeds * MPS_PER_MPH)).tolist()
    search = [c + delay for c in travel]
    sources = _terminals(net, origin, travel, delay, True)
    targets = _terminals(net, dest, travel, delay, False)

    best = None
    # origin and destination on the same link, destination downstream
    for o in origin:
        for d in dest:
            L = net.links[o.link].length
            if o.link == d.link and d.offset > o.offset and not (
                    o.offset <= NODE_SNAP_TOL_M and d.offset >= L - NODE_SNAP_TOL_M):
                cost = (d.offset - o.offset) / L * travel[o.link] + delay
                cand = (cost, (o.link,))
                if best is None or cand < best:
                    best = cand
    try:
        found = lexicographic_shortest(net, search, sources, targets)
    except NoRouteError:
        found = None
    if found is not None and not found[1] and best is None:
        raise RoutingError("origin and destination snap to the same point")
    if found is not None and found[1] and (best is None or found < best):
        best = found
    if best is None:
        raise NoRoute("destination is not reachable from origin")
    links = best[1]
    return links, _fractions(net, links, origin, dest)


def shortest_route(net: RoadNetwork, model: SpeedModel, request: RouteRequest) -> RoutePrediction:
    """Minimum expected-time route under the request's metric.

    Time bins are those of the departure instant for the whole route. A
    junction delay, when the metric has one, is charged at each interior node.
    """
    metric = Metric(request.metric)
    if metric is Metric.HYBRID:
        return hybrid_route(net, model, request)
    speeds, delay, tags = _metric_setup(model, request, net)
    links, fractions = _select(net, speeds, delay, request)
    times, dist = _route_times(net, links, fractions, speeds)
    junctions = len(links) - 1
    t_beta = sum(times) + delay * junctions
    t_chi = bias_correct(t_beta) if metric is Metric.V else t_beta
    return RoutePrediction(links, dist, t_beta, t_chi, times, metric, junctions, tags)


def hybrid_route(net: RoadNetwork, model: SpeedModel, request: RouteRequest) -> RoutePrediction:
    """Select with calibrated road-type speeds, time with Metric V."""
    table = model.calibrated if request.speed_set is None else _table_for(model, request.speed_set)
    sel_speeds, _ = link_speeds(model, Metric.II, net, request.vehicle, request.departure, table)
    links, fractions = _select(net, sel_speeds, table.junction_delay, request)
    v_speeds, tags = link_speeds(model, Metric.V, net, request.vehicle, request.departure)
    times, dist = _route_times(net, links, fractions, v_speeds)
    t_beta = sum(times)
    return RoutePrediction(links, dist, t_beta, bias_correct(t_beta), times, Metric.HYBRID,
                           len(links) - 1, tags)


def estimate_on_fixed_path(net: RoadNetwork, model: SpeedModel, links: Sequence[int],
                           vehicle: VehicleClass, departure, metric: Metric,
                           table: str | SpeedTable | None = None) -> float:
    """Duration (s) of a given link path under a metric, without route search."""
    links = list(links)
    for a, b in zip(links[:-1], links[1:]):
        if net.links[a].to_node != net.links[b].from_node:
            raise RoutingError(f"links {a} and {b} are not consecutive")
    if not links:
        return 0.0
    metric = Metric(metric)
    delay = 0.0
    if metric is Metric.II:
        table = _table_for(model, table)
        delay = table.junction_delay
    speeds, _ = link_speeds(model, Metric.V if metric is Metric.HYBRID else metric, net,
                            vehicle, departure, table)
    times = [float(seconds(net.links[l].length, speeds[l])) for l in links]
    return sum(times) + delay * (len(links) - 1)
