import itertools
import math
from datetime import timedelta

import numpy as np
import pytest

from bluelights import geo
from bluelights.ingest import AvlsRecord, Trace, VehicleClass, aggregate_traces
from bluelights.matching import (MatchedRoute, MatchParams, MatchRejected, _BrokenChain, build_lattice,
                                 coverage_by_road_type, extract_speeds, match_trace, match_traces, viterbi)
from bluelights.network import RoadType
from bluelights.synth import SynthConfig, generate, grid_network

from conftest import MONDAY, ORIGIN, chain_network

AEU = VehicleClass.AEU


def brute_force(emission, transition):
    """Best (score, states) over every candidate sequence, folded left to right."""
    best = None
    for states in itertools.product(*(range(len(e)) for e in emission)):
        score = emission[0][states[0]]
        for t, tr in enumerate(transition):
            score = (score + tr[states[t], states[t + 1]]) + emission[t + 1][states[t + 1]]
        if best is None or score > best[0]:
            best = (score, list(states))
    return best


def test_viterbi_matches_enumeration_on_random_lattices():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 7))
        sizes = rng.integers(1, 4, n)
        emission = [-rng.exponential(2.0, k) for k in sizes]
        transition = []
        for a, b in zip(sizes, sizes[1:]):
            tr = -rng.exponential(1.0, (a, b))
            tr[rng.random((a, b)) < 0.2] = -np.inf
            transition.append(tr)
        expect = brute_force(emission, transition)
        if not np.isfinite(expect[0]):
            with pytest.raises(_BrokenChain):
                viterbi(emission, transition)
            continue
        states, score = viterbi(emission, transition)
        assert score == expect[0]
        assert brute_force_score(emission, transition, states) == score


def brute_force_score(emission, transition, states):
    score = emission[0][states[0]]
    for t, tr in enumerate(transition):
        score = (score + tr[states[t], states[t + 1]]) + emission[t + 1][states[t + 1]]
    return score


def test_viterbi_ties_prefer_lower_index():
    emission = [np.zeros(2), np.zeros(2)]
    states, score = viterbi(emission, [np.zeros((2, 2))])
    assert states == [0, 0] and score == 0.0


def test_three_fix_path_graph_two_candidates():
    net = chain_network([200.0, 200.0, 200.0], RoadType.LocalStreet, oneway=True)
    params = MatchParams(max_candidates=2)
    fixes = [AvlsRecord(MONDAY + timedelta(seconds=15 * k), "A", "I", AEU,
                        geo.offset_point(ORIGIN, 190 + 10 * k + 5 * (k == 1), 4.0 * (-1) ** k), 20, 90)
             for k in range(3)]
    lattice = build_lattice(net, fixes, params)
    assert [len(e) for e in lattice.emission] == [2, 2, 2]
    route = match_trace(net, Trace("A|I|AEU|0", AEU, "I", fixes), params)
    assert route.log_score == brute_force(lattice.emission, lattice.transition)[0]


def _small_instances(count, seed):
    rng = np.random.default_rng(seed)
    net = grid_network(4, 4, 80.0, rule="uniform", jitter_m=15, seed=seed)
    params = MatchParams(sigma_m=12.0, max_candidates=3, cand_radius_m=60.0)
    done = 0
    while done < count:
        n = int(rng.integers(2, 7))
        start = net.node_coords[int(rng.integers(0, net.n_nodes))]
        fixes = []
        p = start
        for k in range(n):
            p = geo.offset_point(p, *rng.normal(0, 40, 2))
            fixes.append(AvlsRecord(MONDAY + timedelta(seconds=15 * k), "A", "I", AEU, p, 20, 0))
        trace = Trace("A|I|AEU|0", AEU, "I", fixes)
        try:
            route = match_trace(net, trace, params)
        except MatchRejected:
            continue
        if route.fixes_dropped:
            continue
        yield net, params, fixes, route
        done += 1


def test_match_trace_score_is_exhaustive_maximum():
    for net, params, fixes, route in _small_instances(60, 1):
        lattice = build_lattice(net, fixes, params)
        assert route.log_score == brute_force(lattice.emission, lattice.transition)[0]


@pytest.fixture(scope="module")
def noiseless_world():
    cfg = SynthConfig(rows=8, cols=8, spacing_m=150.0, road_type_rule="uniform",
                      speeds={RoadType.LocalStreet: 24.0}, noise_m=0.0, journeys=25, seed=3)
    world = generate(cfg)
    traces, _ = aggregate_traces(world.records)
    routes, rejected = match_traces(world.network, traces)
    return world, routes, rejected


def test_noiseless_routes_recovered_exactly(noiseless_world):
    world, routes, rejected = noiseless_world
    assert rejected == []
    truth = {gt.journey_id: gt.links for gt in world.truth}
    assert any(len(t) >= 10 for t in truth.values())
    for r in routes:
        assert r.links == truth[r.journey_id]


def test_route_validity_and_monotone_times(noiseless_world):
    world, routes, _ = noiseless_world
    net = world.network
    for r in routes:
        for a, b in zip(r.links, r.links[1:]):
            assert net.links[a].to_node == net.links[b].from_node
            assert b in net.adjacency[net.links[a].to_node]
        assert all(a < b for a, b in zip(r.entry, r.entry[1:]))
        assert r.exit[:-1] == r.entry[1:]


def test_uniform_speed_observations(noiseless_world):
    world, routes, _ = noiseless_world
    obs = [o for r in routes for o in extract_speeds(r, world.network)[0]]
    assert len(obs) > 100
    assert all(abs(o.speed - 24.0) <= 0.1 for o in obs)


def test_speed_consistency_with_fix_span(noiseless_world):
    world, routes, _ = noiseless_world
    traces, _ = aggregate_traces(world.records)
    span = {t.journey_id: (t.fixes[-1].epoch - t.fixes[0].epoch, len(t.fixes) - 1) for t in traces}
    for r in routes:
        obs, _ = extract_speeds(r, world.network)
        total = sum(world.network.links[o.link].length / (o.speed * geo.MPS_PER_MPH) for o in obs)
        duration, intervals = span[r.journey_id]
        assert total <= duration + intervals * 1.0


def test_quarter_mile_in_thirty_seconds():
    net = chain_network([402.336], bearing="north")
    route = MatchedRoute("j", AEU, (0,), (0.0,), (30.0,), [], (True,))
    obs, skipped = extract_speeds(route, net)
    assert math.isclose(obs[0].speed, 30.0, rel_tol=1e-9) and skipped == 0
    zero = MatchedRoute("j", AEU, (0,), (5.0,), (5.0,), [], (True,))
    assert extract_speeds(zero, net) == ([], 1)
    partial = MatchedRoute("j", AEU, (0,), (0.0,), (30.0,), [], (False,))
    assert extract_speeds(partial, net) == ([], 0)


def test_no_candidate_rejection():
    net = chain_network([400.0])
    far = geo.offset_point(ORIGIN, 200, 300)
    fixes = [AvlsRecord(MONDAY, "A", "I", AEU, ORIGIN, 20, 0),
             AvlsRecord(MONDAY + timedelta(seconds=15), "A", "I", AEU, far, 20, 0)]
    with pytest.raises(MatchRejected, match="no candidate"):
        match_trace(net, Trace("t", AEU, "I", fixes), MatchParams(cand_radius_m=200.0))


def test_degenerate_trace_rejected():
    net = chain_network([400.0])
    p = geo.offset_point(ORIGIN, 100, 0)
    fixes = [AvlsRecord(MONDAY + timedelta(seconds=15 * k), "A", "I", AEU, p, 0, 0) for k in range(3)]
    with pytest.raises(MatchRejected, match="degenerate"):
        match_trace(net, Trace("t", AEU, "I", fixes))


def test_coverage_counts(grid3):
    route = MatchedRoute("j", AEU, (0, 2, 5), (0, 1, 2), (1, 2, 3), [], (True,) * 3)
    cov = coverage_by_road_type([route], grid3)
    assert cov[RoadType.LocalStreet] == (24, 3, 0.125)
    assert all(v[2] == 0.0 for v in coverage_by_road_type([], grid3).values())


def test_coverage_brute_force(noiseless_world):
    world, routes, _ = noiseless_world
    used = set().union(*(r.links for r in routes))
    cov = coverage_by_road_type(routes, world.network)
    for rt, (total, hit, frac) in cov.items():
        ids = {l.id for l in world.network.links if l.road_type is rt}
        assert total == len(ids) and hit == len(ids & used)


def test_batch_results_sorted_by_journey(noiseless_world):
    world, routes, _ = noiseless_world
    assert [r.journey_id for r in routes] == sorted(r.journey_id for r in routes)
