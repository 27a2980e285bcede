"""Synthetic worlds: a grid road network, planted speeds, journeys and telemetry.

Every file written here is in the same format the real pipeline consumes, so
each stage can be checked against known ground truth.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import geo
from ._io import atomic_write_text
from .evaluation import CHARING_CROSS, Journey, journeys_csv, path_coincidence
from .geo import LatLon, MPS_PER_MPH
from .ingest import AvlsRecord, VehicleClass, avls_csv
from .network import RoadNetwork, RoadType, Way, network_from_ways, write_geojson
from .paths import Endpoint, lexicographic_shortest
from .speeds import DEFAULT_TIMEZONE, HOURS_PER_WEEK, hour_of_week

log = logging.getLogger(__name__)

ROAD_TYPE_RULES = ("ring_arterial", "uniform")
TRUTH_COLUMNS = ("journey_id", "seq", "link_id", "entry_ts", "exit_ts", "duration_s")


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    """Parameters of a synthetic world.

    The true speed of a link is ``speeds[road_type] * vehicle_factor[vehicle]
    * hour_profile[hour_of_week]`` evaluated when the vehicle enters it.
    """

    rows: int = 20
    cols: int = 20
    spacing_m: float = 150.0
    jitter_m: float = 0.0
    centre: LatLon = CHARING_CROSS
    road_type_rule: str = "ring_arterial"
    speeds: dict[RoadType, float] = field(default_factory=lambda: {
        RoadType.ARoad: 25.0, RoadType.BRoad: 25.0, RoadType.LocalStreet: 25.0})
    vehicle_factor: dict[VehicleClass, float] = field(default_factory=lambda: {
        VehicleClass.AEU: 1.0, VehicleClass.FRU: 1.0})
    hour_profile: Sequence[float] | None = None
    noise_m: float = 10.0
    interval_s: int = 15
    journeys: int = 500
    seed: int = 42
    junction_pause_s: float = 0.0
    min_trip_m: float = 600.0
    start: datetime = datetime(2016, 11, 7, tzinfo=timezone.utc)
    span_days: float = 7.0
    timezone: str = DEFAULT_TIMEZONE

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise SynthError(f"degenerate grid {self.rows}x{self.cols}: need at least 2 nodes")
        if not self.spacing_m > 0:
            raise SynthError("spacing_m must be positive")
        if not 0 <= self.jitter_m < self.spacing_m / 2:
            raise SynthError("jitter_m must lie in [0, spacing_m / 2)")
        if self.road_type_rule not in ROAD_TYPE_RULES:
            raise SynthError(f"road_type_rule must be one of {ROAD_TYPE_RULES}")
        used = {RoadType.LocalStreet} if self.road_type_rule == "uniform" else {
            RoadType.ARoad, RoadType.BRoad, RoadType.LocalStreet}
        for rt in used:
            if not self.speeds.get(rt, 0) > 0:
                raise SynthError(f"speed for {rt.name} must be positive")
        if any(not f > 0 for f in self.vehicle_factor.values()) or len(self.vehicle_factor) != 2:
            raise SynthError("vehicle_factor needs a positive factor for AEU and FRU")
        if self.hour_profile is not None and (
                len(self.hour_profile) != HOURS_PER_WEEK or min(self.hour_profile) <= 0):
            raise SynthError("hour_profile needs 168 positive multipliers")
        if self.noise_m < 0 or self.interval_s < 1 or self.journeys < 0 or self.junction_pause_s < 0:
            raise SynthError("noise_m, interval_s, journeys and junction_pause_s must be non-negative"
                             " (interval_s at least 1)")

    def true_speed(self, road_type: RoadType, vehicle: VehicleClass, how: int) -> float:
        s = self.speeds[road_type] * self.vehicle_factor[vehicle]
        if self.hour_profile is not None:
            s *= self.hour_profile[how]
        return float(s)


@dataclass(frozen=True)
class GroundTruth:
    journey_id: str
    vehicle: VehicleClass
    departure: datetime
    origin: LatLon
    destination: LatLon
    links: tuple[int, ...]
    entry: tuple[float, ...]     # unix seconds
    exit: tuple[float, ...]
    duration: float

    def journey(self) -> Journey:
        return Journey(self.journey_id, self.vehicle, self.departure, self.origin,
                       self.destination, self.duration, self.links)


@dataclass
class World:
    config: SynthConfig
    network: RoadNetwork
    truth: list[GroundTruth]
    records: list[AvlsRecord]


# --------------------------------------------------------------------------- network


def _grid_road_type(rule: str, horizontal: bool, r: int, c: int, rows: int, cols: int) -> RoadType:
    if rule == "uniform":
        return RoadType.LocalStreet
    if horizontal:
        if r in (0, rows - 1):
            return RoadType.ARoad
        return RoadType.BRoad if r == rows // 2 else RoadType.LocalStreet
    if c in (0, cols - 1):
        return RoadType.ARoad
    return RoadType.BRoad if c == cols // 2 else RoadType.LocalStreet


def grid_network(rows: int, cols: int, spacing_m: float, centre: LatLon = CHARING_CROSS,
                 rule: str = "ring_arterial", jitter_m: float = 0.0, seed: int = 0) -> RoadNetwork:
    """Two-way rectangular grid; node ``r * cols + c`` sits at row ``r``, column ``c``.

    ``jitter_m`` displaces each node uniformly within a square of that
    half-side, which makes equal-cost paths rare.
    """
    if rows * cols < 2:
        raise SynthError(f"degenerate grid {rows}x{cols}: need at least 2 nodes")
    shake = (np.random.default_rng([seed, 7919]).uniform(-jitter_m, jitter_m, size=(rows * cols, 2))
             if jitter_m > 0 else np.zeros((rows * cols, 2)))
    coords = [geo.offset_point(centre, (c - (cols - 1) / 2) * spacing_m + shake[r * cols + c, 0],
                               (r - (rows - 1) / 2) * spacing_m + shake[r * cols + c, 1])
              for r in range(rows) for c in range(cols)]
    ways = []
    for r in range(rows):
        for c in range(cols - 1):
            a, b = r * cols + c, r * cols + c + 1
            ways.append(Way(f"h{r}_{c}", _grid_road_type(rule, True, r, c, rows, cols),
                            a, b, (coords[a], coords[b])))
    for r in range(rows - 1):
        for c in range(cols):
            a, b = r * cols + c, (r + 1) * cols + c
            ways.append(Way(f"v{r}_{c}", _grid_road_type(rule, False, r, c, rows, cols),
                            a, b, (coords[a], coords[b])))
    return network_from_ways(coords, ways)


# --------------------------------------------------------------------------- journeys


def _true_path(net: RoadNetwork, config: SynthConfig, vehicle: VehicleClass, how: int,
               origin: int, dest: int) -> tuple[int, ...]:
    mph = np.array([config.true_speed(l.road_type, vehicle, how) for l in net.links])
    cost = (net.link_length / (mph * MPS_PER_MPH)).tolist()
    _, links = lexicographic_shortest(net, cost, [Endpoint(origin)], [Endpoint(dest)])
    return links


def simulate_journey(net: RoadNetwork, config: SynthConfig, journey_no: int, vehicle: VehicleClass,
                     departure: datetime, origin: int, dest: int,
                     rng: np.random.Generator) -> tuple[GroundTruth, list[AvlsRecord]]:
    """Drive the true path at the planted speeds and emit noisy fixes."""
    t0 = departure.timestamp()
    links = _true_path(net, config, vehicle, hour_of_week(t0, config.timezone), origin, dest)

    # piecewise-linear motion: (start time, end time, link or None for a pause)
    entry, exit_, segments = [], [], []
    t = t0
    for k, lid in enumerate(links):
        if k and config.junction_pause_s > 0:
            segments.append((t, t + config.junction_pause_s, None))
            t += config.junction_pause_s
        mph = config.true_speed(net.links[lid].road_type, vehicle, hour_of_week(t, config.timezone))
        dt = net.links[lid].length / (mph * MPS_PER_MPH)
        entry.append(t)
        exit_.append(t + dt)
        segments.append((t, t + dt, lid))
        t += dt
    arrival = t

    callsign = f"SYN{journey_no:04d}"
    incident = f"INC{journey_no:05d}"
    jid = f"{callsign}|{incident}|{vehicle.name}|0"
    instants = list(range(0, int(math.floor(arrival - t0)) + 1, config.interval_s))
    last = int(math.floor(arrival - t0))
    if last > instants[-1]:
        instants.append(last)

    records = []
    seg_i = 0
    for dt_s in instants:
        now = t0 + dt_s
        while seg_i < len(segments) - 1 and now >= segments[seg_i][1]:
            seg_i += 1
        s0, s1, lid = segments[seg_i]
        if lid is None:
            # paused at the node ending the previous link
            prev = segments[seg_i - 1][2]
            geom = net.links[prev].geometry
            pos, speed, heading = geom[-1], 0.0, geo.bearing_deg(geom[-2], geom[-1])
        else:
            geom = net.links[lid].geometry
            frac = min(1.0, max(0.0, (now - s0) / (s1 - s0)))
            pos = geo.interpolate_along(geom, frac * net.links[lid].length)
            speed = config.true_speed(net.links[lid].road_type, vehicle,
                                      hour_of_week(s0, config.timezone))
            heading = geo.bearing_deg(geom[0], geom[-1])
        if config.noise_m > 0:
            east, north = rng.normal(0.0, config.noise_m, size=2)
            pos = geo.offset_point(pos, float(east), float(north))
        records.append(AvlsRecord(
            datetime.fromtimestamp(now, timezone.utc), callsign, incident, vehicle, pos,
            int(5 * round(speed / 5.0)), int(15 * round(heading / 15.0)) % 360))

    truth = GroundTruth(jid, vehicle, departure, net.node_coords[origin], net.node_coords[dest],
                        tuple(links), tuple(entry), tuple(exit_), arrival - t0)
    return truth, records


def generate(config: SynthConfig) -> World:
    """Build the world in memory; identical config gives identical output."""
    config.validate()
    net = grid_network(config.rows, config.cols, config.spacing_m, config.centre,
                       config.road_type_rule, config.jitter_m, config.seed)
    rng = np.random.default_rng(config.seed)
    n = net.n_nodes
    span = int(config.span_days * 86400)
    truth, records = [], []
    for j in range(config.journeys):
        for _ in range(1000):
            o, d = (int(x) for x in rng.integers(0, n, size=2))
            if o != d and geo.distance_m(net.node_coords[o], net.node_coords[d]) >= config.min_trip_m:
                break
        else:
            raise SynthError(f"no origin-destination pair at least {config.min_trip_m} m apart")
        vehicle = VehicleClass(int(rng.integers(0, 2)))
        departure = config.start + timedelta(seconds=int(rng.integers(0, max(span, 1))))
        sub = np.random.default_rng([config.seed, j])
        gt, recs = simulate_journey(net, config, j, vehicle, departure, o, d, sub)
        truth.append(gt)
        records.extend(recs)
    records.sort(key=lambda r: (r.timestamp, r.callsign))
    log.info("synthesised %d journeys, %d fixes on %d links", len(truth), len(records), net.n_links)
    return World(config, net, truth, records)


def truth_csv(truth: Iterable[GroundTruth]) -> str:
    """Long format: one row per journey link, journey duration repeated."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRUTH_COLUMNS)
    for gt in truth:
        for k, (lid, a, b) in enumerate(zip(gt.links, gt.entry, gt.exit)):
            w.writerow((gt.journey_id, k, lid, f"{a:.3f}", f"{b:.3f}", f"{gt.duration:.3f}"))
    return buf.getvalue()


def read_truth(source) -> dict[str, tuple[tuple[int, ...], float]]:
    """journey_id -> (link path, duration) from a truth CSV."""
    text = source.read() if hasattr(source, "read") else Path(source).read_text(encoding="utf-8")
    rows: dict[str, list[tuple[int, int]]] = {}
    dur: dict[str, float] = {}
    for row in csv.DictReader(io.StringIO(text)):
        rows.setdefault(row["journey_id"], []).append((int(row["seq"]), int(row["link_id"])))
        dur[row["journey_id"]] = float(row["duration_s"])
    return {jid: (tuple(l for _, l in sorted(v)), dur[jid]) for jid, v in rows.items()}


WORLD_FILES = ("network.geojson", "truth.csv", "avls.csv", "journeys.csv")


def generate_world(config: SynthConfig, out_dir) -> dict[str, Path]:
    """Write network, truth, telemetry and journey files into ``out_dir``."""
    world = generate(config)
    out_dir = Path(out_dir)
    texts = (write_geojson(world.network), truth_csv(world.truth), avls_csv(world.records),
             journeys_csv(gt.journey() for gt in world.truth))
    paths = {}
    for name, text in zip(WORLD_FILES, texts):
        atomic_write_text(out_dir / name, text)
        paths[name] = out_dir / name
    return paths


# --------------------------------------------------------------------------- scoring


@dataclass(frozen=True)
class JourneyScore:
    journey_id: str
    coincidence: float
    duration_error: float | None     # predicted - truth, seconds


@dataclass
class ScoreSummary:
    scores: list[JourneyScore]
    skipped: list[str]

    @property
    def mean_coincidence(self) -> float:
        return float(np.mean([s.coincidence for s in self.scores])) if self.scores else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("journey_id", "coincidence", "duration_error_s"))
        for s in self.scores:
            w.writerow((s.journey_id, f"{s.coincidence:.6f}",
                        "" if s.duration_error is None else f"{s.duration_error:.3f}"))
        return buf.getvalue()


def score_against_truth(truth: Mapping[str, tuple[Sequence[int], float]],
                        predicted_links: Mapping[str, Sequence[int]],
                        predicted_durations: Mapping[str, float] | None = None,
                        net: RoadNetwork | None = None) -> ScoreSummary:
    """Path coincidence and duration error of each predicted journey vs truth.

    ``truth`` maps journey id to (link path, duration), as :func:`read_truth`
    returns. Ids present on one side only are reported in ``skipped``.
    """
    predicted_durations = predicted_durations or {}
    scores = []
    for jid in sorted(set(truth) & set(predicted_links)):
        links, duration = truth[jid]
        rep = path_coincidence(links, predicted_links[jid], net)
        err = predicted_durations[jid] - duration if jid in predicted_durations else None
        scores.append(JourneyScore(jid, rep.whole, err))
    return ScoreSummary(scores, sorted(set(truth) ^ set(predicted_links)))
