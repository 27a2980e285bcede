"""Command-line entry point.

Every subcommand reads its settings from flags, optionally layered over a
TOML config file (``--config``); flags win. Outputs are written atomically
and each run leaves a JSON manifest next to its first output. Exit codes:
0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import enum
import hashlib
import io
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from ._io import atomic_write_text

log = logging.getLogger("bluelights")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config keys or input files (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- option registry

# per subcommand: dest -> (flag, builtin default, converter, required)
_OPTIONS: dict[str, dict[str, tuple[str, object, object, bool]]] = {}


def _opt(sub: str, p: argparse.ArgumentParser, flag: str, default=None, conv=str,
         required: bool = False, help: str = "", **kw):
    dest = flag.lstrip("-").replace("-", "_")
    if dest == "from":
        dest = "from_"
    _OPTIONS.setdefault(sub, {})[dest] = (flag, default, conv, required)
    if kw.get("action") == "store_true":
        p.add_argument(flag, dest=dest, action="store_true", default=None, help=help)
    else:
        shown = f" (default: {default})" if default is not None else ""
        p.add_argument(flag, dest=dest, default=None, help=help + shown, **kw)


def _latlon(text: str) -> tuple[float, float]:
    try:
        lat, lon = (float(x) for x in str(text).split(","))
    except ValueError:
        raise ValueError(f"expected lat,lon, got {text!r}") from None
    if not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValueError(f"coordinates out of range: {text!r}")
    return lat, lon


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(x) for x in str(text).lower().split("x"))
    except ValueError:
        raise ValueError(f"expected ROWSxCOLS, got {text!r}") from None
    return r, c


def _positive(conv):
    def check(text):
        v = conv(text)
        if not v > 0:
            raise ValueError(f"must be positive, got {text!r}")
        return v
    return check


def _non_negative(conv):
    def check(text):
        v = conv(text)
        if v < 0:
            raise ValueError(f"must be non-negative, got {text!r}")
        return v
    return check


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _load_config(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"--config: {path}: {exc}") from None


def _resolve(sub: str, args: argparse.Namespace) -> dict:
    """Builtin defaults, then config file, then flags; validated and converted."""
    table = _OPTIONS.get(sub, {})
    raw = {dest: spec[1] for dest, spec in table.items()}
    source = {dest: "default" for dest in table}
    if args.config:
        doc = _load_config(args.config)
        # top-level keys apply to every subcommand; a [subcommand] table overrides them
        section = doc.get(sub, {})
        flat = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        flat.update(section if isinstance(section, dict) else {})
        for key, value in flat.items():
            dest = key.replace("-", "_")
            if dest not in table:
                raise UsageError(f"--config: unknown key {key!r} for {sub}")
            raw[dest], source[dest] = value, "config"
    for dest in table:
        value = getattr(args, dest, None)
        if value is not None:
            raw[dest], source[dest] = value, "flag"
    out = {}
    for dest, (flag, _, conv, required) in table.items():
        value = raw[dest]
        if value is None:
            if required:
                raise UsageError(f"missing required {flag} (or '{dest}' in the config file)")
            out[dest] = None
            continue
        try:
            out[dest] = conv(value) if conv is not None else value
        except (ValueError, TypeError, KeyError) as exc:
            where = flag if source[dest] == "flag" else f"config key '{dest}'"
            raise UsageError(f"{where}: {exc}") from None
    return out


# --------------------------------------------------------------------------- helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _need_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def _write_all(outputs: dict) -> list[str]:
    """Write every output only after all of them have been produced."""
    from .speeds import SpeedModel, save_model

    for path, data in outputs.items():
        if isinstance(data, SpeedModel):
            save_model(data, path)
        else:
            atomic_write_text(path, data)
    return [str(p) for p in outputs]


def _jsonable(v):
    if isinstance(v, enum.Enum):
        return v.name if isinstance(v.value, int) else v.value
    if isinstance(v, datetime):
        return v.isoformat()
    return str(v)


def _manifest(sub: str, cfg: dict, inputs: list, outputs: list[str], started: float,
              target=None) -> None:
    if not outputs and not target:
        return
    canonical = json.dumps({k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())},
                           sort_keys=True, default=_jsonable)
    doc = {
        "tool": "bluelights",
        "version": __version__,
        "subcommand": sub,
        "config": json.loads(canonical),
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": outputs,
        "timing": {"started_utc": datetime.fromtimestamp(started, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
                   "elapsed_s": round(time.time() - started, 3)},
    }
    path = target or f"{outputs[0]}.manifest.json"
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_network(path):
    from .network import NetworkError, build_network

    try:
        return build_network(_need_file(path, "--network"))
    except NetworkError as exc:
        raise UsageError(f"--network: {exc}") from None


def _load_model(path):
    from .speeds import ModelFormatError, load_model

    try:
        return load_model(_need_file(path, "--model"))
    except ModelFormatError as exc:
        raise UsageError(f"--model: {exc}") from None


def _speed_set(value):
    """'LAS', 'NelderMead' or a speed-table CSV path."""
    from .speeds import SpeedTable

    if value in (None, "LAS", "NelderMead"):
        return value
    try:
        return SpeedTable.from_csv(_need_file(value, "--speed-set"), name=Path(value).stem)
    except ValueError as exc:
        raise UsageError(f"--speed-set: {exc}") from None


# --------------------------------------------------------------------------- subcommands


def cmd_build_network(cfg):
    from .network import dump_csv, write_geojson

    net = _load_network(cfg["network"])
    log.info("network: %d nodes, %d directed links", net.n_nodes, net.n_links)
    outputs = {cfg["out"]: dump_csv(net)}
    if cfg["geojson_out"]:
        outputs[cfg["geojson_out"]] = write_geojson(net)
    return [cfg["network"]], outputs


def cmd_synth(cfg):
    from .synth import WORLD_FILES, SynthConfig, SynthError, generate, truth_csv
    from .evaluation import journeys_csv
    from .ingest import avls_csv
    from .network import write_geojson

    rows, cols = cfg["grid"]
    sc = SynthConfig(rows=rows, cols=cols, spacing_m=cfg["spacing_m"], jitter_m=cfg["jitter_m"],
                     noise_m=cfg["noise_m"], interval_s=cfg["interval_s"],
                     journeys=cfg["journeys"], seed=cfg["seed"],
                     junction_pause_s=cfg["junction_pause_s"], road_type_rule=cfg["road_types"])
    if cfg["speed_mph"] is not None:
        sc.speeds = {rt: cfg["speed_mph"] for rt in sc.speeds}
    try:
        world = generate(sc)
    except SynthError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out_dir"])
    texts = (write_geojson(world.network), truth_csv(world.truth), avls_csv(world.records),
             journeys_csv(gt.journey() for gt in world.truth))
    return [], {str(out / name): text for name, text in zip(WORLD_FILES, texts)}


def cmd_ingest(cfg):
    from .ingest import (AvlsParseError, aggregate_traces, filter_stale_fixes, parse_avls,
                         rejects_csv, snap_coverage, traces_csv)

    try:
        parsed = parse_avls(_need_file(cfg["avls"], "--avls"), strict=cfg["strict"])
    except AvlsParseError as exc:
        raise UsageError(f"--avls: {exc}") from None
    kept, stale = filter_stale_fixes(parsed.records)
    traces, short = aggregate_traces(kept, cfg["gap_s"])
    log.info("ingest: %d records, %d rejected, %d stale, %d traces, %d single-fix groups dropped",
             len(parsed.records), len(parsed.rejects), stale, len(traces), short)
    outputs = {cfg["out"]: traces_csv(traces)}
    if cfg["rejects"]:
        outputs[cfg["rejects"]] = rejects_csv(parsed.rejects)
    inputs = [cfg["avls"]]
    if cfg["coverage"]:
        if not cfg["network"]:
            raise UsageError("--coverage needs --network")
        net = _load_network(cfg["network"])
        inputs.append(cfg["network"])
        outputs[cfg["coverage"]] = "month,cumulative_links\n" + "".join(
            f"{m},{n}\n" for m, n in snap_coverage(net, kept))
    return inputs, outputs


def cmd_match(cfg):
    from .ingest import AvlsParseError, read_traces
    from .matching import MatchParams, coverage_by_road_type, match_traces, matched_csv

    net = _load_network(cfg["network"])
    try:
        traces = read_traces(_need_file(cfg["traces"], "--traces"))
        params = MatchParams(cfg["sigma_m"], cfg["beta_m"], cfg["cand_radius_m"], cfg["max_candidates"])
    except (AvlsParseError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    routes, rejected = match_traces(net, traces, params, cfg["threads"])
    log.info("match: %d routes, %d rejected", len(routes), len(rejected))
    outputs = {cfg["out"]: matched_csv(routes, net)}
    if cfg["rejects"]:
        outputs[cfg["rejects"]] = "journey_id,reason\n" + "".join(
            f"{r.journey_id},{r.reason}\n" for r in sorted(rejected, key=lambda r: r.journey_id))
    if cfg["coverage"]:
        cov = coverage_by_road_type(routes, net)
        outputs[cfg["coverage"]] = "road_type,links,used,fraction\n" + "".join(
            f"{rt.name},{a},{b},{f:.6f}\n" for rt, (a, b, f) in cov.items())
    return [cfg["network"], cfg["traces"]], outputs


def _window(text):
    from .ingest import parse_timestamp

    try:
        a, b = str(text).split(",")
        start, end = parse_timestamp(a), parse_timestamp(b)
    except ValueError:
        raise ValueError(f"expected START,END timestamps, got {text!r}") from None
    if end <= start:
        raise ValueError("window end must be after its start")
    return start.timestamp(), end.timestamp()


def cmd_train(cfg):
    from .ingest import AvlsParseError, filter_stale_fixes, parse_avls
    from .matching import read_matched
    from .speeds import (LAS_TABLE, NELDER_MEAD_TABLE, SpeedModel, SpeedTable, TrainingStats,
                         snap_records, train_metric_iii_iv, train_metric_v)

    net = _load_network(cfg["network"])
    try:
        obs = read_matched(_need_file(cfg["matched"], "--matched"))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"--matched: {exc}") from None
    window = cfg["train_window"]
    if window:
        obs = [o for o in obs if window[0] <= o.entry < window[1]]
    inputs = [cfg["network"], cfg["matched"]]
    stats = TrainingStats()
    iii, iv = {}, {}
    if cfg["avls"]:
        try:
            parsed = parse_avls(_need_file(cfg["avls"], "--avls"))
        except AvlsParseError as exc:
            raise UsageError(f"--avls: {exc}") from None
        records = filter_stale_fixes(parsed.records)[0]
        if window:
            records = [r for r in records if window[0] <= r.epoch < window[1]]
        iii, iv = train_metric_iii_iv(net, snap_records(net, records), cfg["timezone"],
                                      cfg["box_half_side_m"], stats)
        inputs.append(cfg["avls"])
    calibrated = NELDER_MEAD_TABLE
    if cfg["speed_table"]:
        try:
            calibrated = SpeedTable.from_csv(_need_file(cfg["speed_table"], "--speed-table"),
                                             name="calibrated")
        except ValueError as exc:
            raise UsageError(f"--speed-table: {exc}") from None
        inputs.append(cfg["speed_table"])
    model = SpeedModel(metric_ii=LAS_TABLE, calibrated=calibrated, metric_iii=iii, metric_iv=iv,
                       metric_v=train_metric_v(obs, cfg["timezone"]), timezone=cfg["timezone"],
                       provenance={"observations": len(obs), "avls_used": stats.used,
                                   "avls_zero_speed": stats.zero_speed})
    log.info("train: %d V links, %d III/IV links", len(model.metric_v), len(iii))
    return inputs, {cfg["out"]: model}


def cmd_route(cfg):
    from .evaluation import PREDICTION_COLUMNS, read_journeys
    from .routing import RouteRequest, RoutingError, shortest_route
    from .speeds import Metric

    net = _load_network(cfg["network"])
    model = _load_model(cfg["model"])
    speed_set = _speed_set(cfg["speed_set"])
    metric = cfg["metric"]
    inputs = [cfg["network"], cfg["model"]]
    if cfg["batch"]:
        if not cfg["out"]:
            raise UsageError("batch mode needs --out")
        try:
            journeys = read_journeys(_need_file(cfg["batch"], "--batch"))
        except ValueError as exc:
            raise UsageError(f"--batch: {exc}") from None
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        failed = 0
        for j in journeys:
            req = RouteRequest(j.origin, j.destination, j.vehicle, j.departure, metric, speed_set)
            try:
                p = shortest_route(net, model, req)
                w.writerow((j.journey_id, ";".join(map(str, p.links)), f"{p.distance:.3f}",
                            f"{p.t_beta:.3f}", f"{p.t_chi:.3f}", p.junctions, p.metric.value, ""))
            except RoutingError as exc:
                failed += 1
                w.writerow((j.journey_id, "", "", "", "", "", Metric(metric).value, str(exc)))
        log.info("route: %d requests, %d failed", len(journeys), failed)
        return inputs + [cfg["batch"]], {cfg["out"]: buf.getvalue()}

    for flag in ("from", "to", "vehicle", "at"):
        if cfg[flag if flag != "from" else "from_"] is None:
            raise UsageError(f"missing required --{flag} (or use --batch)")
    req = RouteRequest(cfg["from_"], cfg["to"], cfg["vehicle"], cfg["at"], metric, speed_set)
    try:
        pred = shortest_route(net, model, req)
    except RoutingError as exc:
        raise _Runtime(str(exc)) from None
    text = json.dumps(pred.to_json(), indent=1, sort_keys=True) + "\n"
    if cfg["out"]:
        return inputs, {cfg["out"]: text}
    sys.stdout.write(text)
    return inputs, {}


class _Runtime(Exception):
    pass


def cmd_calibrate(cfg):
    from .calibrate import CalibrationError, NelderMeadOptions, calibrate, read_corpus
    from .speeds import LAS_TABLE, NELDER_MEAD_TABLE, SpeedTable

    net = _load_network(cfg["network"])
    try:
        corpus = read_corpus(_need_file(cfg["corpus"], "--corpus"), cfg["sample"] or None)
        options = NelderMeadOptions(max_iter=cfg["max_iter"], tol=cfg["tol"], xtol=cfg["xtol"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not corpus:
        raise UsageError("--corpus: no journeys with a links column")
    initial = {"LAS": LAS_TABLE, "NelderMead": NELDER_MEAD_TABLE}.get(cfg["initial"])
    if initial is None:
        try:
            initial = SpeedTable.from_csv(_need_file(cfg["initial"], "--initial"))
        except ValueError as exc:
            raise UsageError(f"--initial: {exc}") from None
    try:
        table, report = calibrate(net, corpus, initial, options)
    except CalibrationError as exc:
        raise _Runtime(str(exc)) from None
    return [cfg["network"], cfg["corpus"]], {cfg["report"]: report.dumps(),
                                             cfg["out_table"]: table.to_csv()}


def cmd_eval(cfg):
    from .evaluation import (CHARING_CROSS, RegionFileError, aggregate, error_table, load_regions,
                             path_coincidence, read_journeys, read_predictions)

    try:
        preds = read_predictions(_need_file(cfg["pred"], "--pred"))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"--pred: {exc}") from None
    try:
        refs = {j.journey_id: j for j in read_journeys(_need_file(cfg["ref"], "--ref"))}
    except ValueError as exc:
        raise UsageError(f"--ref: {exc}") from None
    regions = None
    inputs = [cfg["pred"], cfg["ref"]]
    if cfg["axis"] == "region":
        if not cfg["regions"]:
            raise UsageError("--axis region needs --regions")
        try:
            regions = load_regions(_need_file(cfg["regions"], "--regions"))
        except RegionFileError as exc:
            raise UsageError(f"--regions: {exc}") from None
        inputs.append(cfg["regions"])
    records, skipped = error_table(preds, refs, cfg["centre"] or CHARING_CROSS, cfg["timezone"])
    if skipped:
        log.warning("eval: %d journeys without a counterpart skipped", len(skipped))
    outputs = {cfg["out"]: aggregate(records, cfg["axis"], cfg["value"], regions).to_csv()}
    if cfg["skipped"]:
        outputs[cfg["skipped"]] = "journey_id\n" + "".join(f"{j}\n" for j in skipped)
    if cfg["coincidence"]:
        net = _load_network(cfg["network"]) if cfg["network"] else None
        lines = ["journey_id,whole,q1,q2,q3,q4\n"]
        for jid in sorted(set(preds) & set(refs)):
            if refs[jid].links:
                rep = path_coincidence(refs[jid].links, preds[jid].links, net)
                lines.append(f"{jid},{rep.whole:.6f}," + ",".join(f"{q:.6f}" for q in rep.quartiles) + "\n")
        outputs[cfg["coincidence"]] = "".join(lines)
    return inputs, outputs


def cmd_model_inspect(cfg):
    from .speeds import Metric, layer_csv

    model = _load_model(cfg["model"])
    summary = {
        "timezone": model.timezone,
        "metric_i_mph": model.metric_i_speed,
        "metric_ii": model.metric_ii.name,
        "calibrated": model.calibrated.name,
        "links": {"III": len(model.metric_iii), "IV": len(model.metric_iv), "V": len(model.metric_v)},
        "provenance": model.provenance,
    }
    log.info("model: %s", json.dumps(summary, sort_keys=True))
    if cfg["layer"] in ("II", "NelderMead"):
        table = model.metric_ii if cfg["layer"] == "II" else model.calibrated
        text = table.to_csv()
    else:
        text = layer_csv(model, Metric(cfg["layer"]))
    if cfg["out"]:
        return [cfg["model"]], {cfg["out"]: text}
    sys.stdout.write(text)
    return [cfg["model"]], {}


# --------------------------------------------------------------------------- parser


def _vehicle(v):
    from .ingest import VehicleClass

    try:
        return VehicleClass[str(v)]
    except KeyError:
        raise ValueError(f"vehicle must be AEU or FRU, got {v!r}") from None


def _metric(v):
    from .speeds import Metric

    try:
        return Metric(str(v))
    except ValueError:
        raise ValueError(f"metric must be one of {', '.join(m.value for m in Metric)}, got {v!r}") from None


def _instant(v):
    from .ingest import parse_timestamp

    return parse_timestamp(str(v))


def _choice(*allowed):
    def check(v):
        if v not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {v!r}")
        return v
    return check


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import AXES

    parser = _Parser(prog="bluelights", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file; flags override its keys")
    common.add_argument("--manifest", help="run manifest path (default: <first output>.manifest.json)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more progress output")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def sub(name, help):
        return subs.add_parser(name, help=help, description=help, parents=[common])

    p = sub("build-network", "Build the directed road graph and dump it as CSV.")
    _opt("build-network", p, "--network", required=True, help="road network GeoJSON")
    _opt("build-network", p, "--out", required=True, help="link dump CSV")
    _opt("build-network", p, "--geojson-out", help="normalised GeoJSON with explicit nodes")

    p = sub("synth", "Generate a synthetic network, journeys and AVLS telemetry.")
    _opt("synth", p, "--grid", (20, 20), _grid, help="ROWSxCOLS")
    _opt("synth", p, "--spacing-m", 150.0, _positive(float), help="node spacing")
    _opt("synth", p, "--jitter-m", 0.0, _non_negative(float), help="random node displacement")
    _opt("synth", p, "--road-types", "ring_arterial", _choice("ring_arterial", "uniform"))
    _opt("synth", p, "--speed-mph", None, _positive(float), help="one speed for every road type")
    _opt("synth", p, "--journeys", 500, _non_negative(int))
    _opt("synth", p, "--noise-m", 10.0, _non_negative(float), help="GPS noise sigma")
    _opt("synth", p, "--interval-s", 15, _positive(int), help="fix interval")
    _opt("synth", p, "--junction-pause-s", 0.0, _non_negative(float))
    _opt("synth", p, "--seed", 42, int)
    _opt("synth", p, "--out-dir", required=True)

    p = sub("ingest", "Parse AVLS CSV, drop stale fixes and group fixes into journeys.")
    _opt("ingest", p, "--avls", required=True, help="AVLS CSV")
    _opt("ingest", p, "--out", required=True, help="traces CSV")
    _opt("ingest", p, "--rejects", help="malformed-row report CSV")
    _opt("ingest", p, "--strict", False, _bool, action="store_true", help="fail on the first bad row")
    _opt("ingest", p, "--gap-s", 600.0, _positive(float), help="silence that splits journeys")
    _opt("ingest", p, "--network", help="road network, needed for --coverage")
    _opt("ingest", p, "--coverage", help="monthly snapped-link coverage CSV")

    p = sub("match", "Map-match traces onto the network.")
    _opt("match", p, "--network", required=True)
    _opt("match", p, "--traces", required=True, help="traces CSV from ingest")
    _opt("match", p, "--out", required=True, help="matched-route CSV")
    _opt("match", p, "--rejects", help="rejected-trace report CSV")
    _opt("match", p, "--coverage", help="coverage-by-road-type CSV")
    _opt("match", p, "--sigma-m", 10.0, _positive(float))
    _opt("match", p, "--beta-m", 30.0, _positive(float))
    _opt("match", p, "--cand-radius-m", 150.0, _positive(float))
    _opt("match", p, "--max-candidates", 8, _positive(int))
    _opt("match", p, "--threads", os.cpu_count() or 1, _positive(int), help="worker processes")

    p = sub("train", "Train the layered speed model.")
    _opt("train", p, "--network", required=True)
    _opt("train", p, "--matched", required=True, help="matched-route CSV")
    _opt("train", p, "--avls", help="AVLS CSV for the neighbourhood layers")
    _opt("train", p, "--out", required=True, help="model file")
    _opt("train", p, "--train-window", None, _window, help="START,END (RFC3339, end exclusive)")
    _opt("train", p, "--timezone", "Europe/London", str)
    _opt("train", p, "--box-half-side-m", 250.0, _positive(float))
    _opt("train", p, "--speed-table", help="calibrated speed table CSV to embed")

    p = sub("route", "Predict a route and arrival time (single request or batch).")
    _opt("route", p, "--network", required=True)
    _opt("route", p, "--model", required=True)
    _opt("route", p, "--from", None, _latlon, help="origin lat,lon")
    _opt("route", p, "--to", None, _latlon, help="destination lat,lon")
    _opt("route", p, "--vehicle", None, _vehicle, help="AEU or FRU")
    _opt("route", p, "--at", None, _instant, help="departure time, RFC3339")
    _opt("route", p, "--metric", "V", _metric, help="I, II, III, IV, V or HYBRID")
    _opt("route", p, "--speed-set", help="LAS, NelderMead or a speed-table CSV")
    _opt("route", p, "--batch", help="journeys CSV of requests")
    _opt("route", p, "--out", help="output (JSON, or CSV in batch mode)")

    p = sub("calibrate", "Fit road-type speeds and junction delay to observed routes.")
    _opt("calibrate", p, "--network", required=True)
    _opt("calibrate", p, "--corpus", required=True, help="journeys CSV with a links column")
    _opt("calibrate", p, "--report", required=True, help="JSON report")
    _opt("calibrate", p, "--out-table", required=True, help="fitted speed table CSV")
    _opt("calibrate", p, "--initial", "LAS", str, help="LAS, NelderMead or a speed-table CSV")
    _opt("calibrate", p, "--sample", 200, _non_negative(int), help="corpus size (0 = all)")
    _opt("calibrate", p, "--max-iter", 500, _non_negative(int))
    _opt("calibrate", p, "--tol", 1e-3, _non_negative(float), help="objective spread tolerance")
    _opt("calibrate", p, "--xtol", 1e-3, _non_negative(float), help="simplex size tolerance")

    p = sub("eval", "Aggregate arrival-time errors and path coincidence.")
    _opt("eval", p, "--pred", required=True, help="predictions CSV from route --batch")
    _opt("eval", p, "--ref", required=True, help="journeys CSV with actual durations")
    _opt("eval", p, "--out", required=True, help="summary CSV")
    _opt("eval", p, "--axis", "duration", _choice(*AXES))
    _opt("eval", p, "--value", "error_chi", _choice("error_chi", "error_beta"))
    _opt("eval", p, "--regions", help="polygon GeoJSON for --axis region")
    _opt("eval", p, "--centre", None, _latlon, help="centre lat,lon (default Charing Cross)")
    _opt("eval", p, "--timezone", "Europe/London", str)
    _opt("eval", p, "--skipped", help="CSV of unmatched journey ids")
    _opt("eval", p, "--coincidence", help="per-journey path coincidence CSV")
    _opt("eval", p, "--network", help="network for length-based quartiles")

    p = sub("model-inspect", "Summarise a model and dump one layer as CSV.")
    _opt("model-inspect", p, "--model", required=True)
    _opt("model-inspect", p, "--layer", "V", _choice("II", "NelderMead", "III", "IV", "V"))
    _opt("model-inspect", p, "--out", help="CSV path (default: stdout)")
    return parser


COMMANDS = {
    "build-network": cmd_build_network, "synth": cmd_synth, "ingest": cmd_ingest,
    "match": cmd_match, "train": cmd_train, "route": cmd_route, "calibrate": cmd_calibrate,
    "eval": cmd_eval, "model-inspect": cmd_model_inspect,
}


def main(argv=None) -> int:
    started = time.time()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args.command, args)
        inputs, outputs = COMMANDS[args.command](cfg)
        written = _write_all(outputs)
        _manifest(args.command, cfg, inputs, written, started, args.manifest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except _Runtime as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:           # noqa: BLE001 - report and exit non-zero
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
