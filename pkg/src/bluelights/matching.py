"""Hidden-Markov map-matching of AVLS traces onto the road network.

Hidden states are candidate positions on links near each fix. Emissions
score the fix-to-candidate distance with a Gaussian; transitions score how
much the on-network route distance between consecutive candidates departs
from the straight-line distance between the fixes. The Viterbi path is then
expanded into a connected link sequence with interpolated entry/exit times.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import geo
from .geo import MPS_PER_MPH
from .ingest import AvlsRecord, Trace, VehicleClass
from .network import ROAD_TYPES, RoadNetwork, RoadType
from .paths import bounded_dijkstra, unwind

MIN_TRAVERSAL_S = 0.2
_EDGE_TOL_M = 1e-6
_NODE_TOL_M = 1e-3           # fix this close to a link end counts as on the node


@dataclass(frozen=True)
class MatchParams:
    sigma_m: float = 10.0
    beta_m: float = 30.0
    cand_radius_m: float = 150.0
    max_candidates: int = 8
    cutoff_factor: float = 8.0
    cutoff_slack_m: float = 500.0

    def __post_init__(self):
        for name in ("sigma_m", "beta_m", "cand_radius_m"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value!r}")
        if int(self.max_candidates) != self.max_candidates or self.max_candidates < 1:
            raise ValueError(f"max_candidates must be an integer >= 1, got {self.max_candidates!r}")


@dataclass(frozen=True)
class Candidate:
    link: int
    offset: float          # metres from the link start to the foot point
    point: geo.LatLon
    distance: float        # fix-to-foot great-circle distance, metres


@dataclass
class CandidateFix:
    record: AvlsRecord
    candidates: list[Candidate]


@dataclass
class Lattice:
    """The HMM for one trace: per-fix emissions and per-step transitions.

    ``transition[t][i, j]`` is ``-inf`` where candidate ``j`` of fix ``t+1`` is
    unreachable from candidate ``i`` of fix ``t`` within the search cutoff.
    ``connection[t][(i, j)]`` holds the links strictly between the two
    candidates' links (empty when both lie on one link).
    """

    fixes: list[CandidateFix]
    emission: list[np.ndarray]
    transition: list[np.ndarray]
    connection: list[dict[tuple[int, int], tuple[int, ...]]]


@dataclass
class MatchedRoute:
    journey_id: str
    vehicle: VehicleClass
    links: tuple[int, ...]
    entry: tuple[float, ...]     # unix seconds
    exit: tuple[float, ...]
    fix_assignments: list[tuple[int, float]]
    full: tuple[bool, ...]       # link lies entirely between the first and last fix
    log_score: float = 0.0
    fixes_dropped: int = 0


@dataclass(frozen=True)
class LinkSpeedObservation:
    link: int
    vehicle: VehicleClass
    entry: float                 # unix seconds
    speed: float                 # mph


class MatchRejected(Exception):
    def __init__(self, journey_id: str, reason: str):
        super().__init__(f"{journey_id}: {reason}")
        self.journey_id = journey_id
        self.reason = reason


class _BrokenChain(Exception):
    def __init__(self, step: int):
        self.step = step


def candidates_for(net: RoadNetwork, rec: AvlsRecord, params: MatchParams) -> list[Candidate]:
    out = []
    for lid, proj in net.links_within(rec.position, params.cand_radius_m):
        d = geo.distance_m(rec.position, proj.point)
        out.append(Candidate(lid, proj.offset_m, proj.point, d))
    out.sort(key=lambda c: (c.distance, c.link))
    return out[: params.max_candidates]


def build_lattice(net: RoadNetwork, fixes: Sequence[AvlsRecord], params: MatchParams,
                  journey_id: str = "") -> Lattice:
    cfixes = []
    for rec in fixes:
        cands = candidates_for(net, rec, params)
        if not cands:
            raise MatchRejected(journey_id, "no candidate")
        cfixes.append(CandidateFix(rec, cands))

    emission = [np.array([-0.5 * (c.distance / params.sigma_m) ** 2 for c in cf.candidates])
                for cf in cfixes]
    transition = []
    connection = []
    for t in range(len(cfixes) - 1):
        a, b = cfixes[t], cfixes[t + 1]
        gc = geo.distance_m(a.record.position, b.record.position)
        cutoff = gc * params.cutoff_factor + params.cutoff_slack_m
        tr = np.full((len(a.candidates), len(b.candidates)), -np.inf)
        conn: dict[tuple[int, int], tuple[int, ...]] = {}
        searches: dict[int, tuple[dict, dict]] = {}
        for i, ca in enumerate(a.candidates):
            la = net.links[ca.link]
            head = la.length - ca.offset
            for j, cb in enumerate(b.candidates):
                if cb.link == ca.link and cb.offset >= ca.offset - _EDGE_TOL_M:
                    route = max(0.0, cb.offset - ca.offset)
                    path: tuple[int, ...] = ()
                else:
                    lb = net.links[cb.link]
                    if la.to_node not in searches:
                        searches[la.to_node] = bounded_dijkstra(net, net.length_list,
                                                                la.to_node, cutoff)
                    dist, pred = searches[la.to_node]
                    between = dist.get(lb.from_node)
                    if between is None:
                        continue
                    route = head + between + cb.offset
                    path = None  # filled lazily below
                if route > cutoff:
                    continue
                tr[i, j] = -abs(route - gc) / params.beta_m
                if path is None:
                    path = tuple(unwind(pred, net, la.to_node, lb.from_node))
                conn[(i, j)] = path
        transition.append(tr)
        connection.append(conn)
    return Lattice(cfixes, emission, transition, connection)


def viterbi(emission: Sequence[np.ndarray], transition: Sequence[np.ndarray]) -> tuple[list[int], float]:
    """Most probable state sequence and its log score.

    Scores accumulate left to right (emission, transition, emission, ...).
    Ties go to the lower candidate index. Raises ``_BrokenChain`` when no
    state of some step is reachable.
    """
    delta = np.asarray(emission[0], dtype=float)
    back = []
    for t, tr in enumerate(transition):
        cand = delta[:, None] + tr
        arg = np.argmax(cand, axis=0)
        best = cand[arg, np.arange(cand.shape[1])]
        delta = best + emission[t + 1]
        if not np.isfinite(delta).any():
            raise _BrokenChain(t + 1)
        back.append(arg)
    state = int(np.argmax(delta))
    score = float(delta[state])
    path = [state]
    for arg in reversed(back):
        state = int(arg[state])
        path.append(state)
    path.reverse()
    return path, score


def _interp_times(positions: np.ndarray, times: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Time at each queried route position, constant speed between fixes."""
    d0, d1 = positions[0], positions[-1]
    rate = (d1 - d0) / (times[-1] - times[0])
    out = np.empty(len(query))
    for k, q in enumerate(query):
        if q <= d0:
            out[k] = times[0] - (d0 - q) / rate
        elif q >= d1:
            i = int(np.searchsorted(positions, d1, side="left"))
            out[k] = times[i] + (q - d1) / rate
        else:
            i = int(np.searchsorted(positions, q, side="left"))
            if positions[i] == q:
                out[k] = times[i]
            else:
                f = (q - positions[i - 1]) / (positions[i] - positions[i - 1])
                out[k] = times[i - 1] + f * (times[i] - times[i - 1])
    return out


def _expand(net, lattice: Lattice, states: Sequence[int], trace_id: str, vehicle,
            score: float, dropped: int) -> MatchedRoute:
    chosen = [cf.candidates[s] for cf, s in zip(lattice.fixes, states)]
    links = [chosen[0].link]
    starts = [0.0]
    fix_pos = [chosen[0].offset]
    for t in range(len(chosen) - 1):
        between = lattice.connection[t][(states[t], states[t + 1])]
        nxt = chosen[t + 1]
        if not between and nxt.link == links[-1]:
            # stayed on the same link
            fix_pos.append(starts[-1] + nxt.offset)
            continue
        for lid in between + (nxt.link,):
            starts.append(starts[-1] + net.links[links[-1]].length)
            links.append(lid)
        fix_pos.append(starts[-1] + nxt.offset)

    # a fix sitting on a node may pick the link on the far side of it; drop
    # end links the route only touches at a single point
    assign = [(c.link, c.offset) for c in chosen]
    while len(links) > 1 and fix_pos[0] >= starts[1] - _NODE_TOL_M:
        shift = starts[1]
        links.pop(0)
        starts = [s - shift for s in starts[1:]]
        fix_pos = [max(0.0, p - shift) for p in fix_pos]
        assign = [(links[0], 0.0) if a[0] not in links else a for a in assign]
    while len(links) > 1 and fix_pos[-1] <= starts[-1] + _NODE_TOL_M:
        links.pop()
        starts.pop()
        end = starts[-1] + net.links[links[-1]].length
        fix_pos = [min(p, end) for p in fix_pos]
        assign = [(links[-1], net.links[links[-1]].length) if a[0] not in links else a for a in assign]

    positions = np.maximum.accumulate(np.asarray(fix_pos))
    times = np.array([cf.record.epoch for cf in lattice.fixes])
    if positions[-1] - positions[0] <= 0.0:
        raise MatchRejected(trace_id, "degenerate trace")
    lengths = np.array([net.links[l].length for l in links])
    bounds = np.concatenate((starts, [starts[-1] + lengths[-1]]))
    t_bounds = _interp_times(positions, times, bounds)
    full = tuple(bool(bounds[k] >= positions[0] - 1e-6 and bounds[k + 1] <= positions[-1] + 1e-6)
                 for k in range(len(links)))
    return MatchedRoute(
        journey_id=trace_id,
        vehicle=vehicle,
        links=tuple(links),
        entry=tuple(float(x) for x in t_bounds[:-1]),
        exit=tuple(float(x) for x in t_bounds[1:]),
        fix_assignments=assign,
        full=full,
        log_score=score,
        fixes_dropped=dropped,
    )


def match_trace(net: RoadNetwork, trace: Trace, params: MatchParams = MatchParams()) -> MatchedRoute:
    """Viterbi-optimal route for one trace, or :class:`MatchRejected`.

    A broken chain is repaired once by dropping the more outlying of the two
    fixes around the break.
    """
    fixes = list(trace.fixes)
    if len(fixes) < 2:
        raise MatchRejected(trace.journey_id, "fewer than two fixes")
    if len({f.position for f in fixes}) == 1:
        raise MatchRejected(trace.journey_id, "degenerate trace")
    dropped = 0
    for attempt in range(2):
        lattice = build_lattice(net, fixes, params, trace.journey_id)
        try:
            states, score = viterbi(lattice.emission, lattice.transition)
        except _BrokenChain as exc:
            if attempt == 1:
                raise MatchRejected(trace.journey_id, "broken chain") from None
            t = exc.step
            worse = max((t - 1, t), key=lambda k: (lattice.fixes[k].candidates[0].distance, k))
            del fixes[worse]
            dropped += 1
            if len(fixes) < 2:
                raise MatchRejected(trace.journey_id, "broken chain") from None
            continue
        return _expand(net, lattice, states, trace.journey_id, trace.vehicle, score, dropped)
    raise AssertionError("unreachable")


def extract_speeds(route: MatchedRoute, net: RoadNetwork) -> tuple[list[LinkSpeedObservation], int]:
    """Constant-speed traversal speeds of the fully observed links.

    Links crossed in under ``MIN_TRAVERSAL_S`` seconds are skipped; the
    second return value counts them.
    """
    out = []
    skipped = 0
    for lid, t0, t1, full in zip(route.links, route.entry, route.exit, route.full):
        if not full:
            continue
        dt = t1 - t0
        if dt < MIN_TRAVERSAL_S:
            skipped += 1
            continue
        out.append(LinkSpeedObservation(lid, route.vehicle, t0,
                                        net.links[lid].length / dt / MPS_PER_MPH))
    return out, skipped


def coverage_by_road_type(routes: Iterable[MatchedRoute], net: RoadNetwork) -> dict[RoadType, tuple[int, int, float]]:
    """Per road type: (directed links in network, links used by any route, fraction)."""
    used: set[int] = set()
    for r in routes:
        used.update(r.links)
    total = np.bincount(net.link_type, minlength=len(ROAD_TYPES))
    hit = np.zeros(len(ROAD_TYPES), dtype=np.int64)
    for lid in used:
        hit[net.links[lid].road_type.value] += 1
    return {rt: (int(total[rt.value]), int(hit[rt.value]),
                 float(hit[rt.value] / total[rt.value]) if total[rt.value] else 0.0)
            for rt in ROAD_TYPES}


# --------------------------------------------------------------------------- batch

_worker_net: RoadNetwork | None = None


def _init_worker(net: RoadNetwork) -> None:
    global _worker_net
    _worker_net = net


def _match_one(args):
    trace, params = args
    try:
        return match_trace(_worker_net, trace, params)
    except MatchRejected as exc:
        return exc


def match_traces(net: RoadNetwork, traces: Sequence[Trace], params: MatchParams = MatchParams(),
                 workers: int = 1) -> tuple[list[MatchedRoute], list[MatchRejected]]:
    """Match many traces; results come back ordered by journey id."""
    traces = sorted(traces, key=lambda t: t.journey_id)
    if workers > 1 and len(traces) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(net,)) as pool:
            results = list(pool.map(_match_one, [(t, params) for t in traces], chunksize=8))
    else:
        results = []
        for t in traces:
            try:
                results.append(match_trace(net, t, params))
            except MatchRejected as exc:
                results.append(exc)
    routes = [r for r in results if isinstance(r, MatchedRoute)]
    rejected = [r for r in results if isinstance(r, MatchRejected)]
    return routes, rejected


MATCHED_COLUMNS = ("journey_id", "vehicle", "link_id", "entry_ts", "exit_ts", "speed_mph")


def matched_csv(routes: Iterable[MatchedRoute], net: RoadNetwork) -> str:
    """One row per route link; speed is empty for partially observed links."""
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATCHED_COLUMNS)
    for r in routes:
        for lid, t0, t1, full in zip(r.links, r.entry, r.exit, r.full):
            dt = t1 - t0
            speed = (f"{net.links[lid].length / dt / MPS_PER_MPH:.6f}"
                     if full and dt >= MIN_TRAVERSAL_S else "")
            w.writerow((r.journey_id, r.vehicle.name, lid, f"{t0:.3f}", f"{t1:.3f}", speed))
    return buf.getvalue()


def read_matched(source) -> list[LinkSpeedObservation]:
    """Speed observations from a matched-route CSV (rows with a speed only)."""
    import csv
    import io
    from pathlib import Path

    text = source.read() if hasattr(source, "read") else Path(source).read_text(encoding="utf-8")
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        if row["speed_mph"]:
            out.append(LinkSpeedObservation(int(row["link_id"]), VehicleClass[row["vehicle"]],
                                            float(row["entry_ts"]), float(row["speed_mph"])))
    return out
