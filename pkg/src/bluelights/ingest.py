"""AVLS telemetry ingestion: parsing, stale-fix removal and journey grouping."""

from __future__ import annotations

import csv
import enum
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from .geo import LatLon

log = logging.getLogger(__name__)

AVLS_COLUMNS = ("timestamp_utc", "callsign", "incident_id", "vehicle", "lat", "lon",
                "speed_mph", "heading_deg")
TRACE_COLUMNS = ("journey_id",) + AVLS_COLUMNS

STALE_GAPS_S = (10, 20)
JOURNEY_GAP_S = 600


class VehicleClass(enum.Enum):
    AEU = 0
    FRU = 1


class AvlsParseError(ValueError):
    def __init__(self, row_no: int, reason: str):
        super().__init__(f"row {row_no}: {reason}")
        self.row_no = row_no
        self.reason = reason


@dataclass(frozen=True)
class AvlsRecord:
    timestamp: datetime
    callsign: str
    incident_id: str
    vehicle: VehicleClass
    position: LatLon
    reported_speed: int
    heading: int

    def __post_init__(self):
        if self.reported_speed % 5 or self.reported_speed < 0:
            raise ValueError("speed quantisation")
        if self.heading % 15 or not 0 <= self.heading < 360:
            raise ValueError("heading quantisation")

    @property
    def epoch(self) -> float:
        return self.timestamp.timestamp()


@dataclass
class Trace:
    journey_id: str
    vehicle: VehicleClass
    incident_id: str
    fixes: list[AvlsRecord]

    @property
    def callsign(self) -> str:
        return self.fixes[0].callsign


@dataclass
class ParseResult:
    records: list[AvlsRecord]
    rejects: list[tuple[int, str]] = field(default_factory=list)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError("timestamp without offset")
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_row(row: dict) -> AvlsRecord:
    try:
        ts = parse_timestamp(row["timestamp_utc"])
    except (ValueError, TypeError):
        raise ValueError("bad timestamp") from None
    try:
        vehicle = VehicleClass[row["vehicle"].strip()]
    except KeyError:
        raise ValueError("bad vehicle class") from None
    try:
        lat, lon = float(row["lat"]), float(row["lon"])
    except (TypeError, ValueError):
        raise ValueError("bad coordinate") from None
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValueError("bad coordinate")
    try:
        speed = float(row["speed_mph"])
        heading = float(row["heading_deg"])
    except (TypeError, ValueError):
        raise ValueError("bad number") from None
    if not speed.is_integer() or speed < 0 or int(speed) % 5:
        raise ValueError("speed quantisation")
    if not heading.is_integer() or int(heading) % 15 or not 0 <= heading < 360:
        raise ValueError("heading quantisation")
    callsign = (row["callsign"] or "").strip()
    incident = (row["incident_id"] or "").strip()
    if not callsign or not incident:
        raise ValueError("missing identifier")
    return AvlsRecord(ts, callsign, incident, vehicle, (lat, lon), int(speed), int(heading))


def parse_avls(source, strict: bool = False) -> ParseResult:
    """Read an AVLS CSV file (path or text stream).

    Malformed rows are collected as ``(row_no, reason)`` rejects; with
    ``strict`` the first one raises :class:`AvlsParseError`. Row numbers count
    the header as row 1.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="utf-8")
    if not text.strip():
        log.warning("AVLS input is empty")
        return ParseResult([])
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in AVLS_COLUMNS if c not in (reader.fieldnames or ())]
    if missing:
        raise AvlsParseError(1, f"missing columns {', '.join(missing)}")
    result = ParseResult([])
    for row_no, row in enumerate(reader, start=2):
        try:
            if None in row.values() or None in row:
                raise ValueError("wrong field count")
            result.records.append(_parse_row(row))
        except ValueError as exc:
            if strict:
                raise AvlsParseError(row_no, str(exc)) from None
            result.rejects.append((row_no, str(exc)))
    if result.rejects:
        log.info("rejected %d malformed AVLS rows", len(result.rejects))
    return result


def filter_stale_fixes(records: Sequence[AvlsRecord]) -> tuple[list[AvlsRecord], int]:
    """Drop fixes carrying a stale cached position.

    Compared with the previous retained fix of the same callsign, a fix is
    dropped when its gap is 0 s, or 10/20 s with a bit-identical position.
    Input must be time-ordered per callsign; output keeps the input order.
    """
    last: dict[str, AvlsRecord] = {}
    kept: list[AvlsRecord] = []
    removed = 0
    for rec in records:
        prev = last.get(rec.callsign)
        if prev is not None:
            gap = rec.epoch - prev.epoch
            if gap < 0:
                raise ValueError(f"records for {rec.callsign} are not time-ordered")
            if gap == 0 or (gap in STALE_GAPS_S and rec.position == prev.position):
                removed += 1
                continue
        last[rec.callsign] = rec
        kept.append(rec)
    return kept, removed


def aggregate_traces(records: Iterable[AvlsRecord],
                     gap_s: float = JOURNEY_GAP_S) -> tuple[list[Trace], int]:
    """Group fixes by (callsign, incident, vehicle) into journeys.

    A silence longer than ``gap_s`` within one group starts a new journey.
    Journeys with fewer than two fixes are discarded; the second return value
    counts them. Traces are returned sorted by ``journey_id``.
    """
    groups: dict[tuple[str, str, VehicleClass], list[AvlsRecord]] = defaultdict(list)
    for rec in records:
        groups[(rec.callsign, rec.incident_id, rec.vehicle)].append(rec)
    traces: list[Trace] = []
    discarded = 0
    for (callsign, incident, vehicle), recs in groups.items():
        recs.sort(key=lambda r: r.timestamp)
        pieces: list[list[AvlsRecord]] = [[recs[0]]]
        for rec in recs[1:]:
            gap = rec.epoch - pieces[-1][-1].epoch
            if gap == 0:
                continue
            if gap > gap_s:
                pieces.append([rec])
            else:
                pieces[-1].append(rec)
        for k, fixes in enumerate(pieces):
            if len(fixes) < 2:
                discarded += 1
                continue
            jid = f"{callsign}|{incident}|{vehicle.name}|{k}"
            traces.append(Trace(jid, vehicle, incident, fixes))
    traces.sort(key=lambda t: t.journey_id)
    return traces, discarded


def snap_coverage(net, records: Iterable[AvlsRecord]) -> list[tuple[str, int]]:
    """Cumulative count of distinct nearest links per calendar month (UTC).

    Months without records are included so the series is contiguous.
    """
    by_month: dict[tuple[int, int], set[int]] = defaultdict(set)
    for rec in records:
        lid, _ = net.nearest_link(rec.position)
        by_month[(rec.timestamp.year, rec.timestamp.month)].add(lid)
    if not by_month:
        return []
    (y, m), end = min(by_month), max(by_month)
    seen: set[int] = set()
    out = []
    while (y, m) <= end:
        seen |= by_month.get((y, m), set())
        out.append((f"{y:04d}-{m:02d}", len(seen)))
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


# --------------------------------------------------------------------------- writers


def _record_row(rec: AvlsRecord) -> list:
    return [format_timestamp(rec.timestamp), rec.callsign, rec.incident_id, rec.vehicle.name,
            f"{rec.position[0]:.8f}", f"{rec.position[1]:.8f}", rec.reported_speed, rec.heading]


def avls_csv(records: Iterable[AvlsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AVLS_COLUMNS)
    for rec in records:
        w.writerow(_record_row(rec))
    return buf.getvalue()


def traces_csv(traces: Iterable[Trace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for tr in traces:
        for rec in tr.fixes:
            w.writerow([tr.journey_id] + _record_row(rec))
    return buf.getvalue()


def read_traces(source) -> list[Trace]:
    """Inverse of :func:`traces_csv`."""
    text = source.read() if hasattr(source, "read") else Path(source).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    groups: dict[str, list[AvlsRecord]] = defaultdict(list)
    for row_no, row in enumerate(reader, start=2):
        try:
            groups[row["journey_id"]].append(_parse_row(row))
        except (ValueError, KeyError) as exc:
            raise AvlsParseError(row_no, str(exc)) from None
    return [Trace(jid, fixes[0].vehicle, fixes[0].incident_id, sorted(fixes, key=lambda r: r.timestamp))
            for jid, fixes in sorted(groups.items())]


def rejects_csv(rejects: Iterable[tuple[int, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("row_no", "reason"))
    w.writerows(rejects)
    return buf.getvalue()

