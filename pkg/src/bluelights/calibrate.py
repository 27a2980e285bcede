"""Calibration of road-type speeds and junction delay against observed routes.

The objective is the mean whole-route path coincidence between the routes
chosen under a candidate speed table and the routes vehicles actually took.
It is piecewise constant in the speeds, so a derivative-free simplex search
is used, with out-of-box proposals clipped back into the box.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Sequence

import numpy as np

from .evaluation import Journey, path_coincidence, read_journeys
from .geo import LatLon
from .ingest import VehicleClass
from .network import ROAD_TYPES, RoadNetwork
from .routing import RoutingError, _snap, select_between
from .speeds import LAS_TABLE, SpeedTable

log = logging.getLogger(__name__)

MAX_PERTURBATION_MPH = 20.0
MIN_SPEED_MPH = 0.5
MAX_DELAY_S = 30.0
VECTOR_LABELS = ("junction_delay_s",) + tuple(rt.name for rt in ROAD_TYPES)


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorpusEntry:
    journey_id: str
    origin: LatLon
    destination: LatLon
    vehicle: VehicleClass
    departure: datetime
    links: tuple[int, ...]


def corpus_from_journeys(journeys: Sequence[Journey]) -> list[CorpusEntry]:
    """Journeys that carry an actual link path, in input order."""
    return [CorpusEntry(j.journey_id, j.origin, j.destination, j.vehicle, j.departure, j.links)
            for j in journeys if j.links]


def read_corpus(source, limit: int | None = None) -> list[CorpusEntry]:
    """Corpus from a journeys CSV; ``limit`` keeps the first entries by id."""
    corpus = sorted(corpus_from_journeys(read_journeys(source)), key=lambda e: e.journey_id)
    return corpus[:limit] if limit else corpus


# --------------------------------------------------------------------------- bounds


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def around(cls, initial: SpeedTable, perturbation: float = MAX_PERTURBATION_MPH) -> "Bounds":
        """Speeds within +-``perturbation`` of the start (and above a floor); delay in [0, 30] s."""
        x0 = initial.to_vector()
        lower = np.concatenate(([0.0], np.maximum(x0[1:] - perturbation, MIN_SPEED_MPH)))
        upper = np.concatenate(([MAX_DELAY_S], x0[1:] + perturbation))
        return cls(lower, upper)

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


# --------------------------------------------------------------------------- objective


class RouteSimilarity:
    """Mean whole-route coincidence of Metric II routes under a speed vector.

    Endpoint snapping does not depend on the speeds, so it is done once. An
    entry whose endpoints cannot be snapped or routed scores 0.
    """

    def __init__(self, net: RoadNetwork, corpus: Sequence[CorpusEntry]):
        if not corpus:
            raise CalibrationError("calibration corpus is empty")
        self.net = net
        self.corpus = list(corpus)
        self._snaps = []
        for e in self.corpus:
            try:
                self._snaps.append((_snap(net, e.origin, "origin"), _snap(net, e.destination, "destination")))
            except RoutingError:
                self._snaps.append(None)
        self.evaluations = 0

    def scores(self, vector: Sequence[float]) -> list[float]:
        table = SpeedTable.from_vector(vector)
        speeds = table.speed_array()[self.net.link_type]
        out = []
        for e, snaps in zip(self.corpus, self._snaps):
            if snaps is None:
                out.append(0.0)
                continue
            try:
                links, _ = select_between(self.net, speeds, table.junction_delay, *snaps)
            except RoutingError:
                out.append(0.0)
                continue
            out.append(path_coincidence(e.links, links, self.net).whole)
        return out

    def __call__(self, vector: Sequence[float]) -> float:
        self.evaluations += 1
        return math.fsum(self.scores(vector)) / len(self.corpus)


# --------------------------------------------------------------------------- simplex search


@dataclass(frozen=True)
class NelderMeadOptions:
    max_iter: int = 500
    tol: float = 1e-3            # spread of objective values over the simplex
    xtol: float = 1e-3           # largest vertex distance (max norm) from the best vertex
    step: float = 1.0
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5

    def __post_init__(self):
        if self.max_iter < 0 or not self.tol >= 0 or not self.xtol >= 0 or self.step == 0:
            raise ValueError("max_iter and tolerances must be non-negative and step non-zero")
        if not (self.reflection > 0 and self.expansion > self.reflection
                and 0 < self.contraction < 1 and 0 < self.shrink < 1):
            raise ValueError("need reflection > 0, expansion > reflection, 0 < contraction, shrink < 1")


@dataclass(frozen=True)
class TraceStep:
    iteration: int
    action: str
    best_value: float
    best_vector: tuple[float, ...]


@dataclass
class SimplexResult:
    x: np.ndarray
    value: float                 # objective value (not negated)
    iterations: int
    converged: bool
    evaluations: int
    initial_values: list[float]
    trace: list[TraceStep] = field(default_factory=list)
    evaluated: list[np.ndarray] = field(default_factory=list)


def nelder_mead(func: Callable[[np.ndarray], float], x0: Sequence[float],
                bounds: Bounds | None = None, options: NelderMeadOptions = NelderMeadOptions(),
                maximize: bool = False, keep_points: bool = False) -> SimplexResult:
    """Bounded simplex search; maximisation minimises the negated objective.

    The initial simplex is ``x0`` plus one vertex per coordinate displaced by
    ``options.step``. Any proposal outside ``bounds`` is clipped to it. Ties in
    vertex ordering keep the earlier vertex first, so the run is fully
    deterministic. Stops when both the objective spread and the simplex size
    fall within tolerance, or after ``max_iter`` iterations.
    """
    sign = -1.0 if maximize else 1.0
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    clip = bounds.clip if bounds is not None else (lambda x: x)
    evaluated: list[np.ndarray] = []
    n_eval = 0

    def f(x):
        nonlocal n_eval
        value = float(func(x))
        n_eval += 1
        if not math.isfinite(value):
            raise CalibrationError(f"objective is {value} at {x.tolist()}")
        if keep_points:
            evaluated.append(x.copy())
        return sign * value

    sim = [clip(x0.copy())]
    for i in range(n):
        v = x0.copy()
        v[i] += options.step
        v = clip(v)
        if np.array_equal(v, x0):
            # the step lands outside the box; step the other way
            v = x0.copy()
            v[i] -= options.step
            v = clip(v)
        sim.append(v)
    sim = np.array(sim)
    fs = np.array([f(x) for x in sim])
    initial_values = [sign * v for v in fs]

    def order():
        nonlocal sim, fs
        idx = np.argsort(fs, kind="stable")
        sim, fs = sim[idx], fs[idx]

    order()
    trace = [TraceStep(0, "init", sign * fs[0], tuple(sim[0].tolist()))]
    converged = False
    it = 0
    a, g, c, s = options.reflection, options.expansion, options.contraction, options.shrink
    while it < options.max_iter:
        if (fs[-1] - fs[0] <= options.tol
                and np.max(np.abs(sim[1:] - sim[0])) <= options.xtol):
            converged = True
            break
        it += 1
        centroid = sim[:-1].mean(axis=0)
        xr = clip(centroid + a * (centroid - sim[-1]))
        fr = f(xr)
        if fr < fs[0]:
            xe = clip(centroid + g * (centroid - sim[-1]))
            fe = f(xe)
            if fe < fr:
                sim[-1], fs[-1], action = xe, fe, "expand"
            else:
                sim[-1], fs[-1], action = xr, fr, "reflect"
        elif fr < fs[-2]:
            sim[-1], fs[-1], action = xr, fr, "reflect"
        else:
            if fr < fs[-1]:
                xc = clip(centroid + c * (xr - centroid))
                fc = f(xc)
                ok, action = fc <= fr, "contract_outside"
            else:
                xc = clip(centroid + c * (sim[-1] - centroid))
                fc = f(xc)
                ok, action = fc < fs[-1], "contract_inside"
            if ok:
                sim[-1], fs[-1] = xc, fc
            else:
                action = "shrink"
                for k in range(1, n + 1):
                    sim[k] = clip(sim[0] + s * (sim[k] - sim[0]))
                    fs[k] = f(sim[k])
        order()
        trace.append(TraceStep(it, action, sign * fs[0], tuple(sim[0].tolist())))
    return SimplexResult(sim[0].copy(), sign * fs[0], it, converged, n_eval, initial_values,
                         trace, evaluated)


# --------------------------------------------------------------------------- report


@dataclass
class CalibrationReport:
    initial: tuple[float, ...]
    final: tuple[float, ...]
    initial_objective: float
    final_objective: float
    iterations: int
    converged: bool
    evaluations: int
    corpus_size: int
    trace: list[TraceStep] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "labels": list(VECTOR_LABELS),
            "initial": list(self.initial),
            "final": list(self.final),
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "evaluations": self.evaluations,
            "corpus_size": self.corpus_size,
            "trace": [{"iteration": t.iteration, "action": t.action, "best_value": t.best_value,
                       "best_vector": list(t.best_vector)} for t in self.trace],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1) + "\n"


def calibrate(net: RoadNetwork, corpus: Sequence[CorpusEntry], initial: SpeedTable = LAS_TABLE,
              options: NelderMeadOptions = NelderMeadOptions(),
              perturbation: float = MAX_PERTURBATION_MPH) -> tuple[SpeedTable, CalibrationReport]:
    """Fit a Metric II speed table to a route corpus, starting from ``initial``."""
    objective = RouteSimilarity(net, corpus)
    bounds = Bounds.around(initial, perturbation)
    x0 = initial.to_vector()
    result = nelder_mead(objective, x0, bounds, options, maximize=True)
    start = result.initial_values[0]
    log.info("calibration: %.4f -> %.4f after %d iterations (%d evaluations)",
             start, result.value, result.iterations, result.evaluations)
    report = CalibrationReport(tuple(x0.tolist()), tuple(result.x.tolist()), start, result.value,
                               result.iterations, result.converged, result.evaluations,
                               len(objective.corpus), result.trace)
    return SpeedTable.from_vector(result.x, name="calibrated"), report
