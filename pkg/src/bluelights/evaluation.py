"""Scoring predicted routes and arrival times against observed journeys."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import geo
from .geo import LatLon
from .ingest import VehicleClass, format_timestamp, parse_timestamp
from .speeds import DEFAULT_TIMEZONE, hour_of_day

CHARING_CROSS: LatLon = (51.5073, -0.1276)
QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)
AXES = ("duration", "centre_distance", "hour_of_day", "region")
DURATION_BAND_S = 120.0
DISTANCE_BAND_KM = 2.0


# --------------------------------------------------------------------------- journeys


@dataclass(frozen=True)
class Journey:
    """An observed journey: where and when it ran, how long it took, which links."""

    journey_id: str
    vehicle: VehicleClass
    departure: datetime
    origin: LatLon
    destination: LatLon
    duration: float | None = None
    links: tuple[int, ...] = ()


JOURNEY_COLUMNS = ("journey_id", "vehicle", "departure_utc", "origin_lat", "origin_lon",
                   "dest_lat", "dest_lon", "duration_s", "links")


def journeys_csv(journeys: Iterable[Journey]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(JOURNEY_COLUMNS)
    for j in journeys:
        w.writerow((j.journey_id, j.vehicle.name, format_timestamp(j.departure),
                    f"{j.origin[0]:.8f}", f"{j.origin[1]:.8f}",
                    f"{j.destination[0]:.8f}", f"{j.destination[1]:.8f}",
                    "" if j.duration is None else f"{j.duration:.3f}",
                    ";".join(map(str, j.links))))
    return buf.getvalue()


def read_journeys(source) -> list[Journey]:
    text = source.read() if hasattr(source, "read") else Path(source).read_text(encoding="utf-8")
    out = []
    for row_no, row in enumerate(csv.DictReader(io.StringIO(text)), start=2):
        try:
            links = tuple(int(x) for x in (row.get("links") or "").split(";") if x)
            dur = row.get("duration_s") or ""
            out.append(Journey(
                row["journey_id"], VehicleClass[row["vehicle"]],
                parse_timestamp(row["departure_utc"]),
                (float(row["origin_lat"]), float(row["origin_lon"])),
                (float(row["dest_lat"]), float(row["dest_lon"])),
                float(dur) if dur else None, links))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"journeys file row {row_no}: {exc}") from None
    return out


# --------------------------------------------------------------------------- coincidence


@dataclass(frozen=True)
class SimilarityReport:
    whole: float
    quartiles: tuple[float, float, float, float]


def quartile_assignment(lengths: Sequence[float]) -> list[int]:
    """Quartile (0-3) of each link: the one containing the link's midpoint."""
    total = float(sum(lengths))
    out = []
    start = 0.0
    for L in lengths:
        mid = start + L / 2.0
        out.append(min(3, int(mid / total * 4.0)))
        start += L
    return out


def path_coincidence(actual: Sequence[int], predicted: Iterable[int], net=None) -> SimilarityReport:
    """Share of the actual route's directed links present in the prediction.

    The actual route is cut into four parts of equal length; each link
    belongs to the part holding its midpoint. A part that receives no link
    (a long link straddles it) takes the value of the link covering the
    middle of that part.
    """
    actual = list(actual)
    if not actual:
        raise ValueError("actual path is empty")
    lengths = [net.links[l].length for l in actual] if net is not None else [1.0] * len(actual)
    pred = set(predicted)
    hits = [1.0 if l in pred else 0.0 for l in actual]
    q_of = quartile_assignment(lengths)
    quartiles = []
    total = float(sum(lengths))
    for q in range(4):
        members = [h for h, qq in zip(hits, q_of) if qq == q]
        if members:
            quartiles.append(sum(members) / len(members))
            continue
        centre = (q + 0.5) * total / 4.0
        start = 0.0
        for h, L in zip(hits, lengths):
            if start <= centre <= start + L:
                quartiles.append(h)
                break
            start += L
    return SimilarityReport(sum(hits) / len(hits), tuple(quartiles))


def coincidence_histogram(values: Iterable[float], bins: int = 10) -> np.ndarray:
    """Counts of coincidence values over ``bins`` equal bins of [0, 1]."""
    counts, _ = np.histogram(np.asarray(list(values), dtype=float), bins=bins, range=(0.0, 1.0))
    return counts


# --------------------------------------------------------------------------- errors


@dataclass(frozen=True)
class ErrorRecord:
    journey_id: str
    actual: float
    t_beta: float
    t_chi: float
    error_beta: float
    error_chi: float
    distance: float
    midpoint: LatLon
    centre_distance_km: float
    hour_of_day: int
    vehicle: VehicleClass


@dataclass(frozen=True)
class PredictionRow:
    journey_id: str
    t_beta: float
    t_chi: float
    distance: float = float("nan")
    links: tuple[int, ...] = ()


def error_table(predictions: Mapping[str, PredictionRow], references: Mapping[str, Journey],
                centre: LatLon = CHARING_CROSS,
                tz: str = DEFAULT_TIMEZONE) -> tuple[list[ErrorRecord], list[str]]:
    """Signed errors (predicted - actual; negative means underestimate).

    Returns the records for journeys present on both sides, ordered by id,
    and the sorted ids present on only one side.
    """
    out = []
    skipped = set(predictions) ^ set(references)
    for jid in sorted(set(predictions) & set(references)):
        p, r = predictions[jid], references[jid]
        if r.duration is None:
            skipped.add(jid)
            continue
        mid = geo.midpoint(r.origin, r.destination)
        out.append(ErrorRecord(
            jid, r.duration, p.t_beta, p.t_chi, p.t_beta - r.duration, p.t_chi - r.duration,
            p.distance, mid, geo.distance_m(centre, mid) / 1000.0,
            hour_of_day(r.departure, tz), r.vehicle))
    return out, sorted(skipped)


# --------------------------------------------------------------------------- aggregation


def nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(Fraction(str(q)) * n))
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class Bucket:
    key: float | int | str
    label: str
    count: int
    mean: float
    quantiles: tuple[float, ...]


@dataclass
class AggregateSummary:
    axis: str
    value: str
    buckets: list[Bucket] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "bucket", "count", "mean"] + [f"q{q:g}" for q in QUANTILES])
        for b in self.buckets:
            w.writerow([self.axis, b.label, b.count, f"{b.mean:.6f}"] + [f"{x:.6f}" for x in b.quantiles])
        return buf.getvalue()


class RegionFileError(ValueError):
    pass


def load_regions(source) -> list[tuple[str, object]]:
    """Named polygons from a GeoJSON file (property ``name``)."""
    from shapely.geometry import shape

    text = source.read() if hasattr(source, "read") else Path(source).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
        out = []
        for i, feat in enumerate(doc["features"]):
            geom = shape(feat["geometry"])
            if geom.geom_type not in ("Polygon", "MultiPolygon") or not geom.is_valid:
                raise ValueError(f"feature #{i} is not a valid polygon")
            out.append((str(feat.get("properties", {}).get("name", f"region-{i}")), geom))
        return out
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise RegionFileError(f"malformed region file: {exc}") from None


def sample_regions_path() -> Path:
    """Bundled demo file: four quadrants around the default centre."""
    from importlib.resources import files

    return Path(str(files("bluelights") / "data" / "sample_regions.geojson"))


def _bucket_of(rec: ErrorRecord, axis: str, regions) -> tuple[object, str]:
    if axis == "duration":
        k = int(rec.actual // DURATION_BAND_S)
        return k, f"{k * 2}-{k * 2 + 2} min"
    if axis == "centre_distance":
        k = int(rec.centre_distance_km // DISTANCE_BAND_KM)
        return k, f"{k * 2}-{k * 2 + 2} km"
    if axis == "hour_of_day":
        return rec.hour_of_day, f"{rec.hour_of_day:02d}"
    if axis == "region":
        from shapely.geometry import Point

        pt = Point(rec.midpoint[1], rec.midpoint[0])
        for i, (name, poly) in enumerate(regions):
            if poly.covers(pt):
                return i, name
        return len(regions), "(none)"
    raise ValueError(f"unknown axis {axis!r}; expected one of {', '.join(AXES)}")


def aggregate(records: Sequence[ErrorRecord], axis: str, value: str = "error_chi",
              regions=None) -> AggregateSummary:
    """Per-bucket mean and nearest-rank quantiles of one error column."""
    if axis == "region" and regions is None:
        raise ValueError("region axis needs polygons")
    groups: dict[object, list[float]] = defaultdict(list)
    labels: dict[object, str] = {}
    for rec in records:
        key, label = _bucket_of(rec, axis, regions)
        groups[key].append(float(getattr(rec, value)))
        labels[key] = label
    summary = AggregateSummary(axis, value)
    for key in sorted(groups):
        vals = sorted(groups[key])
        summary.buckets.append(Bucket(key, labels[key], len(vals), math.fsum(vals) / len(vals),
                                      tuple(nearest_rank(vals, q) for q in QUANTILES)))
    return summary


# --------------------------------------------------------------------------- prediction files

PREDICTION_COLUMNS = ("journey_id", "links", "distance_m", "t_beta_s", "t_chi_s", "junctions",
                      "metric", "error")


def read_predictions(source) -> dict[str, PredictionRow]:
    text = source.read() if hasattr(source, "read") else Path(source).read_text(encoding="utf-8")
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row.get("error"):
            continue
        out[row["journey_id"]] = PredictionRow(
            row["journey_id"], float(row["t_beta_s"]), float(row["t_chi_s"]),
            float(row["distance_m"]) if row.get("distance_m") else float("nan"),
            tuple(int(x) for x in (row.get("links") or "").split(";") if x))
    return out
