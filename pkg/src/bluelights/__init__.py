"""Emergency-vehicle routing and arrival-time estimation from AVLS telemetry.

Pipeline stages live in their own modules: ``network`` (road graph),
``ingest`` (telemetry), ``matching`` (map-matching), ``speeds`` (speed
model), ``routing``, ``calibrate``, ``evaluation`` and ``synth``.
"""

from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .geo import LatLon
from .ingest import AvlsRecord, Trace, VehicleClass
from .network import RoadLink, RoadNetwork, RoadType, build_network
from .routing import RoutePrediction, RouteRequest, bias_correct, estimate_on_fixed_path, shortest_route
from .speeds import LAS_TABLE, NELDER_MEAD_TABLE, Metric, SpeedModel, SpeedTable, load_model, save_model

__all__ = [
    "AvlsRecord", "LAS_TABLE", "LatLon", "Metric", "NELDER_MEAD_TABLE", "RoadLink", "RoadNetwork",
    "RoadType", "RoutePrediction", "RouteRequest", "SpeedModel", "SpeedTable", "Trace",
    "VehicleClass", "__version__", "bias_correct", "build_network", "estimate_on_fixed_path",
    "load_model", "save_model", "shortest_route",
]
