"""Dijkstra searches over a :class:`~bluelights.network.RoadNetwork`.

Link costs are passed as a sequence indexed by link id, so the same search
serves distance-weighted map-matching transitions and time-weighted routing.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Mapping, Sequence


def bounded_dijkstra(net, cost: Sequence[float], source: int,
                     cutoff: float = math.inf) -> tuple[dict[int, float], dict[int, int]]:
    """Single-source distances up to ``cutoff``.

    Returns ``(dist, pred_link)`` for every settled node. Ties between equal
    heap keys resolve by node id, so results are deterministic.
    """
    dist = {source: 0.0}
    pred: dict[int, int] = {}
    done: set[int] = set()
    heap = [(0.0, source)]
    adjacency = net.adjacency
    link_to = net.links
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for lid in adjacency[u]:
            nd = d + cost[lid]
            if nd > cutoff:
                continue
            v = link_to[lid].to_node
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                pred[v] = lid
                heapq.heappush(heap, (nd, v))
    return {n: dist[n] for n in done}, {n: pred[n] for n in done if n in pred}


def unwind(pred: Mapping[int, int], net, source: int, target: int) -> list[int]:
    """Link sequence from ``source`` to ``target`` following predecessor links."""
    out = []
    node = target
    while node != source:
        lid = pred[node]
        out.append(lid)
        node = net.links[lid].from_node
    out.reverse()
    return out


@dataclass(frozen=True)
class Endpoint:
    """A search terminal: a node plus a cost and links to prepend or append."""

    node: int
    cost: float = 0.0
    links: tuple[int, ...] = ()


class NoRouteError(RuntimeError):
    pass


def lexicographic_shortest(net, cost: Sequence[float], sources: Sequence[Endpoint],
                           targets: Sequence[Endpoint]) -> tuple[float, tuple[int, ...]]:
    """Minimum-cost route from any source to any target.

    The route is ``source.links + path + target.links`` and its cost is
    ``source.cost + sum(cost[path]) + target.cost``. Among equal-cost routes
    the lexicographically smallest link sequence wins: distances are settled
    first, then the answer is read greedily off the tight-edge DAG.
    """
    start: dict[int, float] = {}
    for s in sources:
        if s.cost < start.get(s.node, math.inf):
            start[s.node] = s.cost
    extra: dict[int, list[Endpoint]] = {}
    for t in targets:
        extra.setdefault(t.node, []).append(t)

    dist: dict[int, float] = dict(start)
    settled: list[int] = []
    done: set[int] = set()
    heap = [(d, n) for n, d in start.items()]
    heapq.heapify(heap)
    best = math.inf
    adjacency = net.adjacency
    links = net.links
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if d > best:
            break
        done.add(u)
        settled.append(u)
        for t in extra.get(u, ()):
            if d + t.cost < best:
                best = d + t.cost
        for lid in adjacency[u]:
            nd = d + cost[lid]
            v = links[lid].to_node
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    if best == math.inf:
        raise NoRouteError("destination unreachable")

    # nodes that can still finish on an optimal route
    finish: set[int] = set()
    for u in reversed(settled):
        du = dist[u]
        if any(du + t.cost == best for t in extra.get(u, ())):
            finish.add(u)
            continue
        for lid in adjacency[u]:
            v = links[lid].to_node
            if v in finish and du + cost[lid] == dist[v]:
                finish.add(u)
                break

    opening = sorted(
        (s.links, s.node) for s in sources
        if s.node in finish and s.cost == dist[s.node]
    )
    prefix, u = opening[0]
    route = list(prefix)
    while True:
        # options: stop here through a target, or follow a tight edge
        options: list[tuple[tuple[int, ...], int | None]] = []
        for t in extra.get(u, ()):
            if dist[u] + t.cost == best:
                options.append((t.links, None))
        for lid in adjacency[u]:
            v = links[lid].to_node
            if v in finish and dist[u] + cost[lid] == dist[v] and v != u:
                options.append(((lid,), v))
        links_, nxt = min(options, key=lambda o: o[0])
        route.extend(links_)
        if nxt is None:
            return best, tuple(route)
        u = nxt
