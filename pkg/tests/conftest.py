import math
from datetime import datetime, timezone

import numpy as np
import pytest

from bluelights import geo
from bluelights.ingest import VehicleClass
from bluelights.network import RoadLink, RoadNetwork, RoadType, Way, network_from_ways
from bluelights.speeds import HOURS_PER_WEEK, SpeedMatrix, SpeedModel, hour_of_week
from bluelights.synth import grid_network

ORIGIN = (51.5073, -0.1276)
MONDAY = datetime(2016, 11, 7, tzinfo=timezone.utc)


def chain_network(lengths_m, road_type=RoadType.LocalStreet, bearing="east", oneway=False):
    """Straight road of consecutive ways with the given lengths."""
    coords = [ORIGIN]
    for L in lengths_m:
        east, north = (L, 0.0) if bearing == "east" else (0.0, L)
        coords.append(geo.offset_point(coords[-1], east, north))
    ways = [Way(f"w{i}", road_type, i, i + 1, (coords[i], coords[i + 1]), oneway=oneway)
            for i in range(len(lengths_m))]
    return network_from_ways(coords, ways)


def digraph_network(n_nodes, edges, radius_m=500.0):
    """Network with nodes on a circle and one straight link per ``(u, v)`` edge.

    On a circle no chord passes through a third node, so a node coordinate
    snaps only onto its own incident links.
    """
    coords = [geo.offset_point(ORIGIN, radius_m * math.cos(2 * math.pi * k / n_nodes),
                               radius_m * math.sin(2 * math.pi * k / n_nodes))
              for k in range(n_nodes)]
    links = []
    for i, (u, v) in enumerate(edges):
        g = (coords[u], coords[v])
        links.append(RoadLink(i, u, v, geo.polyline_length_m(g), RoadType.LocalStreet, g, False, f"e{i}"))
    return RoadNetwork(coords, links)


def model_with_link_speeds(speeds_mph, when=MONDAY, vehicle=VehicleClass.AEU):
    """Speed model whose Metric V layer sets one speed per link at ``when``."""
    layer = {}
    b = hour_of_week(when, "UTC")
    for lid, s in enumerate(speeds_mph):
        m = layer[lid] = SpeedMatrix(HOURS_PER_WEEK)
        m.add(vehicle.value, b, float(s))
    return SpeedModel(metric_v=layer, timezone="UTC")


def simple_paths(net, source, target):
    """Every simple directed path (as link tuples) from ``source`` to ``target``."""
    out = []
    stack = [(source, (), {source})]
    while stack:
        u, path, seen = stack.pop()
        if u == target and path:
            out.append(path)
            continue
        for lid in net.adjacency[u]:
            v = net.links[lid].to_node
            if v not in seen or (v == target and v == source):
                stack.append((v, path + (lid,), seen | {v}))
    return out


def fold_cost(costs, path):
    total = 0.0
    for lid in path:
        total = total + costs[lid]
    return total


@pytest.fixture(scope="session")
def grid3():
    return grid_network(3, 3, 100.0, rule="uniform")


@pytest.fixture(scope="session")
def grid10():
    return grid_network(10, 10, 100.0, rule="uniform")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
