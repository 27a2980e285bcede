"""scikit-learn style wrappers around the pipeline stages.

Inputs are domain objects (traces, observations, route requests), not
feature matrices, so these follow the fit/transform/predict and parameter
conventions without claiming array-input compatibility.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import calibrate as _cal
from .matching import MatchParams, MatchedRoute, extract_speeds, match_traces
from .network import RoadNetwork
from .routing import RouteRequest, RoutePrediction, RoutingError, shortest_route
from .speeds import (DEFAULT_BOX_HALF_SIDE_M, DEFAULT_TIMEZONE, LAS_TABLE, NELDER_MEAD_TABLE,
                     Metric, SpeedModel, SpeedTable, link_speed, snap_records,
                     train_metric_iii_iv, train_metric_v)


def _check_network(net) -> RoadNetwork:
    if not isinstance(net, RoadNetwork):
        raise TypeError(f"network must be a RoadNetwork, got {type(net).__name__}")
    return net


class MapMatcher(TransformerMixin, BaseEstimator):
    """Traces in, matched routes out (rejections kept in ``rejected_``)."""

    def __init__(self, network=None, sigma_m=10.0, beta_m=30.0, cand_radius_m=150.0,
                 max_candidates=8, n_jobs=1):
        self.network = network
        self.sigma_m = sigma_m
        self.beta_m = beta_m
        self.cand_radius_m = cand_radius_m
        self.max_candidates = max_candidates
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        self.network_ = _check_network(self.network)
        self.params_ = MatchParams(self.sigma_m, self.beta_m, self.cand_radius_m, self.max_candidates)
        return self

    def transform(self, X) -> list[MatchedRoute]:
        check_is_fitted(self, "params_")
        routes, self.rejected_ = match_traces(self.network_, list(X), self.params_, self.n_jobs)
        return routes

    def speeds(self, routes: Sequence[MatchedRoute]):
        """Traversal-speed observations of the fully observed links."""
        check_is_fitted(self, "params_")
        out = []
        for r in routes:
            out.extend(extract_speeds(r, self.network_)[0])
        return out


class SpeedModelEstimator(BaseEstimator):
    """Learns the layered speed model.

    ``fit(observations, records=...)`` takes map-matched traversal speeds for
    the link-local layer and, optionally, raw AVLS records for the
    neighbourhood layers.
    """

    def __init__(self, network=None, metric="V", timezone=DEFAULT_TIMEZONE,
                 box_half_side_m=DEFAULT_BOX_HALF_SIDE_M, metric_ii=LAS_TABLE,
                 calibrated=NELDER_MEAD_TABLE):
        self.network = network
        self.metric = metric
        self.timezone = timezone
        self.box_half_side_m = box_half_side_m
        self.metric_ii = metric_ii
        self.calibrated = calibrated

    def fit(self, X, y=None, records=()):
        net = _check_network(self.network)
        if not self.box_half_side_m > 0:
            raise ValueError("box_half_side_m must be positive")
        Metric(self.metric)
        iii, iv = train_metric_iii_iv(net, snap_records(net, records), self.timezone,
                                      self.box_half_side_m) if records else ({}, {})
        self.model_ = SpeedModel(metric_ii=self.metric_ii, calibrated=self.calibrated,
                                 metric_iii=iii, metric_iv=iv,
                                 metric_v=train_metric_v(list(X), self.timezone),
                                 timezone=self.timezone)
        return self

    def predict(self, X) -> np.ndarray:
        """Speeds (mph) for ``(link, vehicle, instant)`` queries."""
        check_is_fitted(self, "model_")
        return np.array([link_speed(self.model_, Metric(self.metric), self.network, l, v, t)[0]
                         for l, v, t in X])


class RoutePredictor(BaseEstimator):
    """Route requests in, predictions out; failed requests yield ``None``."""

    def __init__(self, network=None, model=None, metric="V", speed_set=None):
        self.network = network
        self.model = model
        self.metric = metric
        self.speed_set = speed_set

    def fit(self, X=None, y=None):
        self.network_ = _check_network(self.network)
        if not isinstance(self.model, SpeedModel):
            raise TypeError("model must be a SpeedModel")
        self.metric_ = Metric(self.metric)
        return self

    def predict(self, X: Sequence[RouteRequest]) -> list[RoutePrediction | None]:
        check_is_fitted(self, "metric_")
        out = []
        for req in X:
            req = RouteRequest(req.origin, req.destination, req.vehicle, req.departure,
                               self.metric_, self.speed_set if req.speed_set is None else req.speed_set)
            try:
                out.append(shortest_route(self.network_, self.model, req))
            except RoutingError:
                out.append(None)
        return out


class SpeedTableCalibrator(BaseEstimator):
    """Fits road-type speeds and junction delay to a corpus of observed routes."""

    def __init__(self, network=None, initial=LAS_TABLE, max_iter=500, tol=1e-3, xtol=1e-3,
                 step=1.0, perturbation=_cal.MAX_PERTURBATION_MPH):
        self.network = network
        self.initial = initial
        self.max_iter = max_iter
        self.tol = tol
        self.xtol = xtol
        self.step = step
        self.perturbation = perturbation

    def fit(self, X, y=None):
        net = _check_network(self.network)
        if not isinstance(self.initial, SpeedTable):
            raise TypeError("initial must be a SpeedTable")
        options = _cal.NelderMeadOptions(self.max_iter, self.tol, self.xtol, self.step)
        self.table_, self.report_ = _cal.calibrate(net, list(X), self.initial, options,
                                                   self.perturbation)
        return self

    def score(self, X, y=None) -> float:
        """Mean whole-route coincidence of the fitted table on a corpus."""
        check_is_fitted(self, "table_")
        return _cal.RouteSimilarity(self.network, list(X))(self.table_.to_vector())
