import io
import random
from datetime import timedelta

import pytest
from hypothesis import given, strategies as st

from bluelights import geo
from bluelights.ingest import (AVLS_COLUMNS, AvlsParseError, AvlsRecord, VehicleClass, aggregate_traces,
                               avls_csv, filter_stale_fixes, parse_avls, read_traces, snap_coverage,
                               traces_csv)
from bluelights.synth import grid_network

from conftest import MONDAY, ORIGIN

HEADER = ",".join(AVLS_COLUMNS)


def rec(t, callsign="A1", incident="I1", vehicle=VehicleClass.AEU, pos=ORIGIN, speed=20, heading=90):
    return AvlsRecord(MONDAY + timedelta(seconds=t), callsign, incident, vehicle, pos, speed, heading)


def test_parse_three_rows():
    text = "\n".join([HEADER,
                      "2016-11-07T08:00:00Z,A1,I1,AEU,51.5,-0.12,20,90",
                      "2016-11-07T08:00:15+00:00,A1,I1,AEU,51.5001,-0.12,25,90",
                      "2016-11-07T09:00:30+01:00,A1,I1,FRU,51.5002,-0.12,0,345"])
    res = parse_avls(io.StringIO(text))
    assert len(res.records) == 3 and res.rejects == []
    assert res.records[2].timestamp == MONDAY.replace(hour=8, second=30)
    assert res.records[2].vehicle is VehicleClass.FRU


@pytest.mark.parametrize("row, reason", [
    ("2016-11-07T08:00:00Z,A1,I1,AEU,51.5,-0.12,23,90", "speed quantisation"),
    ("2016-11-07T08:00:00Z,A1,I1,AEU,51.5,-0.12,20,100", "heading quantisation"),
    ("2016-11-07T08:00:00Z,A1,I1,AEU,51.5,-0.12,20,360", "heading quantisation"),
    ("2016-11-07T08:00:00,A1,I1,AEU,51.5,-0.12,20,90", "bad timestamp"),
    ("2016-11-07T08:00:00Z,A1,I1,CAR,51.5,-0.12,20,90", "bad vehicle class"),
    ("2016-11-07T08:00:00Z,A1,I1,AEU,95,-0.12,20,90", "bad coordinate"),
    ("2016-11-07T08:00:00Z,A1,I1,AEU,51.5,-0.12,20", "wrong field count"),
])
def test_malformed_rows_rejected_with_reason(row, reason):
    text = f"{HEADER}\n2016-11-07T08:00:00Z,A1,I1,AEU,51.5,-0.12,20,90\n{row}\n"
    res = parse_avls(io.StringIO(text))
    assert len(res.records) == 1
    assert res.rejects == [(3, reason)]
    with pytest.raises(AvlsParseError, match="row 3: " + reason):
        parse_avls(io.StringIO(text), strict=True)


def test_empty_file_warns(caplog):
    assert parse_avls(io.StringIO("")).records == []
    assert "empty" in caplog.text


def test_missing_columns_is_fatal():
    with pytest.raises(AvlsParseError, match="missing columns"):
        parse_avls(io.StringIO("timestamp_utc,callsign\n"))


def test_unreadable_file(tmp_path):
    with pytest.raises(OSError):
        parse_avls(tmp_path / "nope.csv")


def test_record_invariants():
    with pytest.raises(ValueError):
        rec(0, speed=7)
    with pytest.raises(ValueError):
        rec(0, heading=20)


def test_regular_cadence_kept():
    recs = [rec(15 * k, pos=geo.offset_point(ORIGIN, 0, 0)) for k in range(4)]
    kept, removed = filter_stale_fixes(recs)
    assert kept == recs and removed == 0


def test_duplicate_timestamp_dropped():
    a, b = rec(0), rec(0, pos=geo.offset_point(ORIGIN, 50, 0))
    assert filter_stale_fixes([a, b]) == ([a], 1)


@pytest.mark.parametrize("gap", [10, 20])
def test_cached_position_signature(gap):
    a = rec(0)
    same = rec(gap)
    moved = rec(gap, pos=geo.offset_point(ORIGIN, 30, 0))
    assert filter_stale_fixes([a, same]) == ([a], 1)
    assert filter_stale_fixes([a, moved]) == ([a, moved], 0)


def test_gap_measured_from_last_retained_fix():
    a, dup, nxt = rec(0), rec(10), rec(20)
    # dup is dropped, so nxt is compared with a (gap 20, same position) and dropped too
    assert filter_stale_fixes([a, dup, nxt]) == ([a], 2)


_fix_stream = st.lists(st.tuples(st.sampled_from([0, 5, 10, 15, 20]), st.booleans(), st.sampled_from("AB")),
                       max_size=40)


def _build(stream):
    t = {"A": 0, "B": 0}
    pos = {"A": ORIGIN, "B": ORIGIN}
    out = []
    for gap, moves, cs in stream:
        t[cs] += gap
        if moves:
            pos[cs] = geo.offset_point(pos[cs], 10, 0)
        out.append(rec(t[cs], callsign=cs, pos=pos[cs]))
    return out


@given(_fix_stream)
def test_filter_idempotent(stream):
    once, _ = filter_stale_fixes(_build(stream))
    assert filter_stale_fixes(once) == (once, 0)


def test_two_callsigns_one_incident():
    recs = [rec(0, "A1"), rec(15, "A1"), rec(0, "B2"), rec(15, "B2")]
    traces, discarded = aggregate_traces(recs)
    assert [t.callsign for t in traces] == ["A1", "B2"] and discarded == 0


def test_single_fix_group_discarded():
    traces, discarded = aggregate_traces([rec(0, "A1"), rec(15, "A1"), rec(0, "C3")])
    assert len(traces) == 1 and discarded == 1


def test_long_silence_splits_journey():
    traces, _ = aggregate_traces([rec(0), rec(15), rec(15 + 601), rec(15 + 616)])
    assert [t.journey_id for t in traces] == ["A1|I1|AEU|0", "A1|I1|AEU|1"]


def test_shuffled_partition_recovered():
    truth = {}
    recs = []
    for key in [("A1", "I1", VehicleClass.AEU), ("A1", "I2", VehicleClass.AEU), ("B2", "I1", VehicleClass.FRU)]:
        group = [rec(15 * k, *key) for k in range(6)]
        truth["|".join([key[0], key[1], key[2].name, "0"])] = group
        recs.extend(group)
    random.Random(3).shuffle(recs)
    traces, discarded = aggregate_traces(recs)
    assert discarded == 0
    assert {t.journey_id: t.fixes for t in traces} == truth
    assert [t.journey_id for t in traces] == sorted(truth)


@given(_fix_stream)
def test_aggregation_partitions(stream):
    kept, _ = filter_stale_fixes(_build(stream))
    traces, discarded = aggregate_traces(kept)
    seen = [id(r) for t in traces for r in t.fixes]
    assert len(seen) == len(set(seen))
    for t in traces:
        assert len(t.fixes) >= 2
        assert all(a.timestamp < b.timestamp for a, b in zip(t.fixes, t.fixes[1:]))
    # every retained record lands in exactly one trace unless its group was discarded
    in_traces = {id(r) for t in traces for r in t.fixes}
    lost = [r for r in kept if id(r) not in in_traces]
    assert len(lost) == discarded


@pytest.fixture(scope="module")
def line_net():
    return grid_network(2, 4, 200.0, rule="uniform")


def test_coverage_single_link(line_net):
    p = line_net.link_midpoint(0)
    recs = [AvlsRecord(MONDAY.replace(month=m), "A", "I", VehicleClass.AEU, p, 0, 0) for m in (11, 12)]
    assert snap_coverage(line_net, recs) == [("2016-11", 1), ("2016-12", 1)]


def test_coverage_set_union(line_net):
    a, b, c = (line_net.link_midpoint(i) for i in (0, 2, 4))
    month = lambda m, p: AvlsRecord(MONDAY.replace(month=m), "A", "I", VehicleClass.AEU, p, 0, 0)
    assert snap_coverage(line_net, [month(11, a), month(11, b), month(12, b), month(12, c)]) == [
        ("2016-11", 2), ("2016-12", 3)]


def test_coverage_brute_force(line_net, rng):
    lat = [c[0] for c in line_net.node_coords]
    lon = [c[1] for c in line_net.node_coords]
    recs = []
    for _ in range(300):
        m = int(rng.integers(1, 4))
        p = (rng.uniform(min(lat), max(lat)), rng.uniform(min(lon), max(lon)))
        recs.append(AvlsRecord(MONDAY.replace(year=2017, month=m, day=1 + int(rng.integers(0, 28))),
                               "A", "I", VehicleClass.AEU, p, 0, 0))
    got = snap_coverage(line_net, recs)
    for k, (label, count) in enumerate(got):
        upto = {line_net.nearest_link(r.position)[0] for r in recs if r.timestamp.month <= k + 1}
        assert label == f"2017-{k + 1:02d}" and count == len(upto)
    counts = [c for _, c in got]
    assert counts == sorted(counts) and counts[-1] <= line_net.n_links


def test_csv_round_trips():
    recs = [rec(15 * k, pos=geo.offset_point(ORIGIN, 10 * k, 0)) for k in range(3)]
    assert parse_avls(io.StringIO(avls_csv(recs))).records[0].timestamp == recs[0].timestamp
    traces, _ = aggregate_traces(recs)
    again = read_traces(io.StringIO(traces_csv(traces)))
    assert [t.journey_id for t in again] == [t.journey_id for t in traces]
    assert len(again[0].fixes) == 3
