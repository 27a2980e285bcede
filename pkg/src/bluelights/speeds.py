"""Per-link speed layers and their training.

Five ways of costing a link, from coarse to fine:

* ``I``   one fixed speed everywhere;
* ``II``  a speed per road type plus a fixed delay per junction crossed;
* ``III`` harmonic mean of raw AVLS speeds near the link, by hour of day;
* ``IV``  as III but by hour of week;
* ``V``   harmonic mean of map-matched speeds on the link itself, by hour of
  week, falling back to IV, III and finally II when a cell is empty.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from . import geo
from .ingest import AvlsRecord, VehicleClass
from .network import ROAD_TYPES, RoadNetwork, RoadType

METRIC_I_SPEED_MPH = 22.8
DEFAULT_TIMEZONE = "Europe/London"
DEFAULT_BOX_HALF_SIDE_M = 250.0
HOURS_PER_DAY = 24
HOURS_PER_WEEK = 168
N_VEHICLES = len(VehicleClass)


class Metric(enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    IV = "IV"
    V = "V"
    HYBRID = "HYBRID"


# --------------------------------------------------------------------------- speed tables


@dataclass(frozen=True)
class SpeedTable:
    """Road-type speeds (mph) and the delay (s) charged per junction crossed."""

    speeds: Mapping[RoadType, float]
    junction_delay: float
    name: str = "custom"

    def __post_init__(self):
        missing = [rt.name for rt in ROAD_TYPES if rt not in self.speeds]
        if missing:
            raise ValueError(f"speed table lacks {', '.join(missing)}")
        if any(not (s > 0 and math.isfinite(s)) for s in self.speeds.values()):
            raise ValueError("road-type speeds must be positive and finite")
        if not (self.junction_delay >= 0 and math.isfinite(self.junction_delay)):
            raise ValueError("junction delay must be non-negative")

    def speed_array(self) -> np.ndarray:
        return np.array([self.speeds[rt] for rt in ROAD_TYPES], dtype=float)

    def to_vector(self) -> np.ndarray:
        """``[junction_delay, speed per RoadType...]``."""
        return np.concatenate(([self.junction_delay], self.speed_array()))

    @classmethod
    def from_vector(cls, v: Sequence[float], name: str = "custom") -> "SpeedTable":
        v = [float(x) for x in v]
        return cls(dict(zip(ROAD_TYPES, v[1:])), v[0], name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("road_type", "mph"))
        for rt in ROAD_TYPES:
            w.writerow((rt.name, repr(float(self.speeds[rt]))))
        w.writerow(("junction_delay_s", repr(float(self.junction_delay))))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source, name: str = "custom") -> "SpeedTable":
        text = source.read() if hasattr(source, "read") else Path(source).read_text(encoding="utf-8")
        speeds: dict[RoadType, float] = {}
        delay = None
        for row in csv.DictReader(io.StringIO(text)):
            key = row["road_type"].strip()
            if key == "junction_delay_s":
                delay = float(row["mph"])
            else:
                try:
                    speeds[RoadType[key]] = float(row["mph"])
                except KeyError:
                    raise ValueError(f"unknown road type {key!r} in speed table") from None
        if delay is None:
            raise ValueError("speed table has no junction_delay_s row")
        return cls(speeds, delay, name)


LAS_TABLE = SpeedTable({
    RoadType.Motorway: 35.0,
    RoadType.ARoad: 29.0,
    RoadType.BRoad: 24.0,
    RoadType.MinorRoad: 19.0,
    RoadType.LocalStreet: 14.0,
    RoadType.PrivatePublic: 5.0,
    RoadType.PrivateRestricted: 5.0,
    RoadType.Alley: 3.0,
    RoadType.PedestrianisedStreet: 2.0,
}, junction_delay=2.5, name="LAS")

NELDER_MEAD_TABLE = SpeedTable({
    RoadType.Motorway: 35.47,
    RoadType.ARoad: 29.39,
    RoadType.BRoad: 26.83,
    RoadType.MinorRoad: 18.97,
    RoadType.LocalStreet: 15.51,
    RoadType.PrivatePublic: 8.37,
    RoadType.PrivateRestricted: 6.84,
    RoadType.Alley: 5.31,
    RoadType.PedestrianisedStreet: 5.37,
}, junction_delay=4.33, name="NelderMead")


# --------------------------------------------------------------------------- time bins


@lru_cache(maxsize=16)
def _zone(name: str):
    return timezone.utc if name.upper() == "UTC" else ZoneInfo(name)


def _local(instant, tz: str) -> datetime:
    if isinstance(instant, datetime):
        return instant.astimezone(_zone(tz))
    return datetime.fromtimestamp(float(instant), _zone(tz))


def hour_of_day(instant, tz: str = DEFAULT_TIMEZONE) -> int:
    return _local(instant, tz).hour


def hour_of_week(instant, tz: str = DEFAULT_TIMEZONE) -> int:
    """Monday 00:00-00:59 local time is bin 0."""
    local = _local(instant, tz)
    return local.weekday() * HOURS_PER_DAY + local.hour


# --------------------------------------------------------------------------- accumulators


class HarmonicAccumulator:
    """Mergeable harmonic mean: keeps the reciprocal sum and the count."""

    __slots__ = ("recip_sum", "count")

    def __init__(self, recip_sum: float = 0.0, count: int = 0):
        self.recip_sum = recip_sum
        self.count = count

    def add(self, value: float) -> None:
        if not value > 0:
            raise ValueError("harmonic mean needs positive values")
        self.recip_sum += 1.0 / value
        self.count += 1

    def merge(self, other: "HarmonicAccumulator") -> "HarmonicAccumulator":
        return HarmonicAccumulator(self.recip_sum + other.recip_sum, self.count + other.count)

    __add__ = merge

    @property
    def mean(self) -> float | None:
        return self.count / self.recip_sum if self.count else None

    def __repr__(self) -> str:
        return f"HarmonicAccumulator(recip_sum={self.recip_sum!r}, count={self.count})"


class SpeedMatrix:
    """Harmonic-mean cells indexed by (vehicle class, time bin)."""

    def __init__(self, n_bins: int, recip_sum=None, count=None):
        self.n_bins = n_bins
        self.recip_sum = (np.zeros((N_VEHICLES, n_bins)) if recip_sum is None
                          else np.asarray(recip_sum, dtype=float))
        self.count = (np.zeros((N_VEHICLES, n_bins), dtype=np.int64) if count is None
                      else np.asarray(count, dtype=np.int64))

    def add(self, vehicle: int, bin_: int, speed: float) -> None:
        self.recip_sum[vehicle, bin_] += 1.0 / speed
        self.count[vehicle, bin_] += 1

    def cell(self, vehicle: VehicleClass | int, bin_: int) -> HarmonicAccumulator:
        v = vehicle.value if isinstance(vehicle, VehicleClass) else vehicle
        return HarmonicAccumulator(float(self.recip_sum[v, bin_]), int(self.count[v, bin_]))

    def speed(self, vehicle: VehicleClass | int, bin_: int) -> float | None:
        v = vehicle.value if isinstance(vehicle, VehicleClass) else vehicle
        n = self.count[v, bin_]
        return float(n / self.recip_sum[v, bin_]) if n else None

    def merge(self, other: "SpeedMatrix") -> "SpeedMatrix":
        return SpeedMatrix(self.n_bins, self.recip_sum + other.recip_sum, self.count + other.count)

    def populated(self):
        """Yield ``(vehicle, bin, speed, count)`` for non-empty cells."""
        for v, b in zip(*np.nonzero(self.count)):
            yield int(v), int(b), float(self.count[v, b] / self.recip_sum[v, b]), int(self.count[v, b])

    def __eq__(self, other) -> bool:
        return (isinstance(other, SpeedMatrix) and self.n_bins == other.n_bins
                and np.array_equal(self.recip_sum, other.recip_sum)
                and np.array_equal(self.count, other.count))


Layer = dict  # link id -> SpeedMatrix


def merge_layers(a: Mapping[int, SpeedMatrix], b: Mapping[int, SpeedMatrix]) -> dict[int, SpeedMatrix]:
    out = dict(a)
    for lid, m in b.items():
        out[lid] = out[lid].merge(m) if lid in out else m
    return out


# --------------------------------------------------------------------------- model


@dataclass
class SpeedModel:
    metric_i_speed: float = METRIC_I_SPEED_MPH
    metric_ii: SpeedTable = LAS_TABLE
    calibrated: SpeedTable = NELDER_MEAD_TABLE
    metric_iii: dict[int, SpeedMatrix] = field(default_factory=dict)
    metric_iv: dict[int, SpeedMatrix] = field(default_factory=dict)
    metric_v: dict[int, SpeedMatrix] = field(default_factory=dict)
    timezone: str = DEFAULT_TIMEZONE
    provenance: dict = field(default_factory=dict)

    def layer(self, metric: Metric) -> dict[int, SpeedMatrix]:
        return {Metric.III: self.metric_iii, Metric.IV: self.metric_iv,
                Metric.V: self.metric_v}[metric]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpeedModel):
            return NotImplemented
        return (self.metric_i_speed == other.metric_i_speed
                and self.metric_ii == other.metric_ii and self.calibrated == other.calibrated
                and self.timezone == other.timezone and self.provenance == other.provenance
                and self.metric_iii == other.metric_iii and self.metric_iv == other.metric_iv
                and self.metric_v == other.metric_v)


@dataclass(frozen=True)
class SnappedObservation:
    link: int
    vehicle: VehicleClass
    instant: float          # unix seconds
    speed: float            # mph
    position: geo.LatLon


def snap_records(net: RoadNetwork, records: Iterable[AvlsRecord]) -> list[SnappedObservation]:
    """Attach each fix to its nearest link (naive GPS snapping)."""
    out = []
    for rec in records:
        lid, _ = net.nearest_link(rec.position)
        out.append(SnappedObservation(lid, rec.vehicle, rec.epoch, float(rec.reported_speed),
                                      rec.position))
    return out


@dataclass
class TrainingStats:
    used: int = 0
    zero_speed: int = 0


def train_metric_iii_iv(net: RoadNetwork, observations: Sequence[SnappedObservation],
                        tz: str = DEFAULT_TIMEZONE,
                        box_half_side_m: float = DEFAULT_BOX_HALF_SIDE_M,
                        stats: TrainingStats | None = None):
    """Neighbourhood-pooled layers (hour of day, hour of week).

    A link's cell pools every observation whose position lies inside the
    metric square of half-side ``box_half_side_m`` centred on the link's
    midpoint and whose snapped link has the same road type. Zero speeds are
    skipped and counted in ``stats``.
    """
    stats = stats if stats is not None else TrainingStats()
    rows = [o for o in observations if o.speed > 0]
    stats.zero_speed += len(observations) - len(rows)
    stats.used += len(rows)
    iii: dict[int, SpeedMatrix] = {}
    iv: dict[int, SpeedMatrix] = {}
    if not rows or net.n_links == 0:
        return iii, iv

    lat = np.array([o.position[0] for o in rows])
    lon = np.array([o.position[1] for o in rows])
    rtype = net.link_type[np.array([o.link for o in rows])]
    veh = np.array([o.vehicle.value for o in rows])
    recip = 1.0 / np.array([o.speed for o in rows])
    hod = np.array([hour_of_day(o.instant, tz) for o in rows])
    how = np.array([hour_of_week(o.instant, tz) for o in rows])

    ref_lat = float(np.mean(lat))
    my, mx = geo.metres_per_degree(ref_lat)
    cell_lat, cell_lon = box_half_side_m / my, box_half_side_m / mx
    buckets: dict[tuple[int, int, int], list[int]] = defaultdict(list)
    for k, (ci, cj, t) in enumerate(zip(np.floor(lat / cell_lat).astype(int),
                                        np.floor(lon / cell_lon).astype(int), rtype)):
        buckets[(int(t), int(ci), int(cj))].append(k)
    buckets_arr = {k: np.array(v) for k, v in buckets.items()}

    by_way: dict[str, tuple[SpeedMatrix, SpeedMatrix] | None] = {}
    for link in net.links:
        key = f"{link.source_way}\x00{link.road_type.value}"
        if key not in by_way:
            center = net.link_midpoint(link.id)
            lat_min, lat_max, lon_min, lon_max = geo.box_bounds(center, box_half_side_m)
            t = link.road_type.value
            parts = [buckets_arr[(t, i, j)]
                     for i in range(math.floor(lat_min / cell_lat), math.floor(lat_max / cell_lat) + 1)
                     for j in range(math.floor(lon_min / cell_lon), math.floor(lon_max / cell_lon) + 1)
                     if (t, i, j) in buckets_arr]
            result = None
            if parts:
                idx = np.sort(np.concatenate(parts))
                inside = idx[(lat[idx] >= lat_min) & (lat[idx] <= lat_max)
                             & (lon[idx] >= lon_min) & (lon[idx] <= lon_max)]
                if len(inside):
                    m3 = SpeedMatrix(HOURS_PER_DAY)
                    m4 = SpeedMatrix(HOURS_PER_WEEK)
                    np.add.at(m3.recip_sum, (veh[inside], hod[inside]), recip[inside])
                    np.add.at(m3.count, (veh[inside], hod[inside]), 1)
                    np.add.at(m4.recip_sum, (veh[inside], how[inside]), recip[inside])
                    np.add.at(m4.count, (veh[inside], how[inside]), 1)
                    result = (m3, m4)
            by_way[key] = result
        result = by_way[key]
        if result is not None:
            iii[link.id], iv[link.id] = result
    return iii, iv


def train_metric_v(observations: Iterable, tz: str = DEFAULT_TIMEZONE) -> dict[int, SpeedMatrix]:
    """Link-local hour-of-week harmonic means of map-matched traversal speeds.

    ``observations`` are :class:`~bluelights.matching.LinkSpeedObservation`
    (anything with ``link``, ``vehicle``, ``entry`` and ``speed``).
    """
    layer: dict[int, SpeedMatrix] = {}
    for obs in observations:
        if not (obs.speed > 0 and math.isfinite(obs.speed)):
            continue
        m = layer.get(obs.link)
        if m is None:
            m = layer[obs.link] = SpeedMatrix(HOURS_PER_WEEK)
        m.add(obs.vehicle.value, hour_of_week(obs.entry, tz), obs.speed)
    return layer


# --------------------------------------------------------------------------- lookups


def _table_for(model: SpeedModel, table) -> SpeedTable:
    if table is None or table == "LAS":
        return model.metric_ii
    if table == "NelderMead":
        return model.calibrated
    return table


_CHAINS = {
    Metric.III: (Metric.III,),
    Metric.IV: (Metric.IV, Metric.III),
    Metric.V: (Metric.V, Metric.IV, Metric.III),
    Metric.HYBRID: (Metric.V, Metric.IV, Metric.III),
}


def _layered(model: SpeedModel, metric: Metric, link: int, road: RoadType, v: int,
             hod: int, how: int) -> tuple[float, str]:
    for step in _CHAINS[metric]:
        m = model.layer(step).get(link)
        if m is None:
            continue
        s = m.speed(v, hod if step is Metric.III else how)
        if s is not None:
            own = step is Metric.V or step is metric
            return s, step.value if own else f"fallback:{step.value}"
    return float(model.metric_ii.speeds[road]), "fallback:II"


def link_speed(model: SpeedModel, metric: Metric, net: RoadNetwork, link: int,
               vehicle: VehicleClass, instant, table=None) -> tuple[float, str]:
    """Speed (mph) of one link and the layer that supplied it.

    Never empty: missing neighbourhood cells fall back to the road-type
    table; Metric V falls back through IV, III and II. ``HYBRID`` answers as
    Metric V does.
    """
    metric = Metric(metric)
    road = net.links[link].road_type
    if metric is Metric.I:
        return model.metric_i_speed, "I"
    if metric is Metric.II:
        return float(_table_for(model, table).speeds[road]), "II"
    tz = model.timezone
    return _layered(model, metric, link, road, vehicle.value,
                    hour_of_day(instant, tz), hour_of_week(instant, tz))


def link_speeds(model: SpeedModel, metric: Metric, net: RoadNetwork, vehicle: VehicleClass,
                instant, table=None) -> tuple[np.ndarray, dict[str, int]]:
    """Vectorised :func:`link_speed` over every link, with provenance counts."""
    metric = Metric(metric)
    if metric is Metric.I:
        return np.full(net.n_links, model.metric_i_speed), {"I": net.n_links}
    if metric is Metric.II:
        return _table_for(model, table).speed_array()[net.link_type], {"II": net.n_links}
    hod = hour_of_day(instant, model.timezone)
    how = hour_of_week(instant, model.timezone)
    out = np.empty(net.n_links)
    tags: dict[str, int] = defaultdict(int)
    for link in net.links:
        out[link.id], tag = _layered(model, metric, link.id, link.road_type, vehicle.value, hod, how)
        tags[tag] += 1
    return out, dict(tags)


# --------------------------------------------------------------------------- model file

MAGIC = b"BLSM"
FORMAT_VERSION = 1
_LAYER_TAGS = {b"L3": Metric.III, b"L4": Metric.IV, b"L5": Metric.V}


class ModelFormatError(ValueError):
    pass


class ModelChecksumError(ModelFormatError):
    pass


class ModelVersionError(ModelFormatError):
    pass


def _table_json(t: SpeedTable) -> dict:
    return {"name": t.name, "junction_delay": t.junction_delay,
            "speeds": {rt.name: t.speeds[rt] for rt in ROAD_TYPES}}


def _table_from_json(d: dict) -> SpeedTable:
    return SpeedTable({RoadType[k]: float(v) for k, v in d["speeds"].items()},
                      float(d["junction_delay"]), d["name"])


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _layer_payload(layer: Mapping[int, SpeedMatrix], n_bins: int) -> bytes:
    links, vehs, bins, sums, counts = [], [], [], [], []
    for lid in sorted(layer):
        m = layer[lid]
        for v, b in zip(*np.nonzero(m.count)):
            links.append(lid)
            vehs.append(v)
            bins.append(b)
            sums.append(m.recip_sum[v, b])
            counts.append(m.count[v, b])
    n = len(links)
    return (struct.pack("<IQ", n_bins, n)
            + np.asarray(links, dtype="<u4").tobytes()
            + np.asarray(vehs, dtype="<u1").tobytes()
            + np.asarray(bins, dtype="<u2").tobytes()
            + np.asarray(sums, dtype="<f8").tobytes()
            + np.asarray(counts, dtype="<u8").tobytes())


def _layer_from_payload(payload: bytes) -> dict[int, SpeedMatrix]:
    n_bins, n = struct.unpack_from("<IQ", payload, 0)
    pos = 12
    cols = []
    for dtype, width in (("<u4", 4), ("<u1", 1), ("<u2", 2), ("<f8", 8), ("<u8", 8)):
        cols.append(np.frombuffer(payload, dtype=dtype, count=n, offset=pos))
        pos += width * n
    if pos != len(payload):
        raise ModelFormatError("layer section has trailing bytes")
    layer: dict[int, SpeedMatrix] = {}
    for lid, v, b, s, c in zip(*cols):
        m = layer.get(int(lid))
        if m is None:
            m = layer[int(lid)] = SpeedMatrix(n_bins)
        m.recip_sum[v, b] = s
        m.count[v, b] = c
    return layer


def model_to_bytes(model: SpeedModel) -> bytes:
    meta = {
        "metric_i_speed": model.metric_i_speed,
        "metric_ii": _table_json(model.metric_ii),
        "calibrated": _table_json(model.calibrated),
        "timezone": model.timezone,
        "provenance": model.provenance,
    }
    body = MAGIC + struct.pack("<I", FORMAT_VERSION)
    body += _section(b"MT", json.dumps(meta, sort_keys=True).encode("utf-8"))
    body += _section(b"L3", _layer_payload(model.metric_iii, HOURS_PER_DAY))
    body += _section(b"L4", _layer_payload(model.metric_iv, HOURS_PER_WEEK))
    body += _section(b"L5", _layer_payload(model.metric_v, HOURS_PER_WEEK))
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> SpeedModel:
    if len(data) < 12 or data[:4] != MAGIC:
        raise ModelFormatError("not a speed model file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            f"model file format version {version} is not supported (this build reads version {FORMAT_VERSION})")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ModelChecksumError("model file checksum mismatch (truncated or corrupt)")
    pos = 8
    meta = None
    layers: dict[Metric, dict] = {}
    while pos < len(body):
        tag = body[pos:pos + 2]
        (size,) = struct.unpack_from("<Q", body, pos + 2)
        payload = body[pos + 10:pos + 10 + size]
        pos += 10 + size
        if tag == b"MT":
            meta = json.loads(payload.decode("utf-8"))
        elif tag in _LAYER_TAGS:
            layers[_LAYER_TAGS[tag]] = _layer_from_payload(payload)
        else:
            raise ModelFormatError(f"unknown section {tag!r}")
    if meta is None:
        raise ModelFormatError("model file has no metadata section")
    return SpeedModel(
        metric_i_speed=meta["metric_i_speed"],
        metric_ii=_table_from_json(meta["metric_ii"]),
        calibrated=_table_from_json(meta["calibrated"]),
        metric_iii=layers.get(Metric.III, {}),
        metric_iv=layers.get(Metric.IV, {}),
        metric_v=layers.get(Metric.V, {}),
        timezone=meta["timezone"],
        provenance=meta["provenance"],
    )


def save_model(model: SpeedModel, path) -> None:
    from ._io import atomic_write_bytes

    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> SpeedModel:
    return model_from_bytes(Path(path).read_bytes())


def layer_csv(model: SpeedModel, metric: Metric) -> str:
    """CSV dump of one layer: link_id, vehicle, bin, speed_mph, n."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("link_id", "vehicle", "bin", "speed_mph", "n"))
    layer = model.layer(Metric(metric))
    for lid in sorted(layer):
        for v, b, s, n in layer[lid].populated():
            w.writerow((lid, VehicleClass(v).name, b, f"{s:.6f}", n))
    return buf.getvalue()
