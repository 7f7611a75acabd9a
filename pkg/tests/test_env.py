import itertools
import json
import math

import numpy as np
import pytest
from conftest import brute_force_distances

from cmgnav.env import (STOP, GraphValidationError, NavGraph, default_t_max, generate_graph, make_graph,
                        oracle_action, oracle_path, shortest_distance, start_episode, step)


def small_graph(n, seed):
    k_max = 1 if n == 2 else min(4, n - 1)
    return generate_graph(n, k_max, 8, np.random.default_rng(seed), graph_id=f"g{n}_{seed}")


def bfs_reach(g: NavGraph, src: int = 0) -> set:
    seen, frontier = {src}, [src]
    while frontier:
        nxt = []
        for u in frontier:
            for v in g.directions[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return seen


# -- generation ------------------------------------------------------------------------------

def test_two_node_graph():
    g = generate_graph(2, 1, 8, np.random.default_rng(0))
    assert g.edges == [(0, 1)]
    assert g.n_directions(0) == 2 and g.n_directions(1) == 2


@pytest.mark.parametrize("seed", range(5))
def test_fifty_node_graph_connected_and_valid(seed):
    g = generate_graph(50, 5, 16, np.random.default_rng(seed))
    assert bfs_reach(g) == set(range(50))
    g.validate()
    for node in range(g.n_nodes):
        assert g.n_directions(node) <= g.k_max + 1
        np.testing.assert_array_equal(g.features[node][STOP], 0.0)
        assert len(set(g.directions[node])) == len(g.directions[node])
    for a, b in g.edges:
        assert abs(g.weight(a, b) - math.hypot(*(g.coords[a] - g.coords[b]))) < 1e-9


def test_feature_heading_block():
    g = make_graph([[0, 0], [3, 4]], [(0, 1)], feature_dim=8)
    f = g.features[0][1]
    np.testing.assert_allclose(f[-4:], [0.6, 0.8, 5.0, 1.0], atol=1e-12)


@pytest.mark.parametrize("args", [(1, 2, 8), (5, 5, 8), (5, 1, 8), (5, 3, 4)])
def test_infeasible_parameters(args):
    with pytest.raises(ValueError):
        generate_graph(*args, np.random.default_rng(0))


def test_generation_deterministic():
    a = generate_graph(30, 5, 16, np.random.default_rng(3))
    b = generate_graph(30, 5, 16, np.random.default_rng(3))
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)


def test_directions_counter_clockwise_from_east():
    g = make_graph([[0, 0], [0, 2], [-2, 0], [2, 0], [0, -2]], [(0, 1), (0, 2), (0, 3), (0, 4)])
    assert g.directions[0] == [3, 1, 2, 4]


# -- shortest distance ---------------------------------------------------------------------------

def test_three_four_five():
    g = make_graph([[0, 0], [3, 4]], [(0, 1)])
    assert shortest_distance(g, 0, 1) == 5.0
    assert shortest_distance(g, 1, 1) == 0.0


def test_unknown_node():
    g = make_graph([[0, 0], [3, 4]], [(0, 1)])
    with pytest.raises(KeyError):
        shortest_distance(g, 0, 7)
    with pytest.raises(KeyError):
        oracle_action(g, 9, 0)


@pytest.mark.parametrize("seed", range(25))
def test_dijkstra_matches_brute_force(seed):
    n = 2 + seed % 7
    g = small_graph(n, seed)
    bf = brute_force_distances(g)
    for a, b in itertools.product(range(n), repeat=2):
        assert shortest_distance(g, a, b) == pytest.approx(bf[a, b], abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_metric_properties(seed):
    g = generate_graph(20, 4, 8, np.random.default_rng(100 + seed))
    d = np.array([[shortest_distance(g, a, b) for b in range(20)] for a in range(20)])
    np.testing.assert_allclose(d, d.T, atol=1e-12)
    assert (np.diag(d) == 0).all() and (d[~np.eye(20, dtype=bool)] > 0).all()
    for a, b, c in itertools.product(range(20), repeat=3):
        assert d[a, c] <= d[a, b] + d[b, c] + 1e-9


# -- oracle ----------------------------------------------------------------------------------------

def test_oracle_stop_at_goal_and_chain():
    g = make_graph([[0, 0], [1, 0], [2, 0]], [(0, 1), (1, 2)])
    assert oracle_action(g, 2, 2) == STOP
    assert g.neighbor(0, oracle_action(g, 0, 2)) == 1


def test_oracle_tie_breaks_to_lowest_direction():
    # square: 0 -> 3 via 1 or via 2 at equal cost
    g = make_graph([[0, 0], [1, 0], [0, 1], [1, 1]], [(0, 1), (0, 2), (1, 3), (2, 3)])
    assert oracle_action(g, 0, 3) == 1


@pytest.mark.parametrize("seed", range(25))
def test_oracle_rollout_is_shortest(seed):
    n = 2 + seed % 7
    g = small_graph(n, 1000 + seed)
    bf = brute_force_distances(g)
    for a, b in itertools.product(range(n), repeat=2):
        path = oracle_path(g, a, b)
        length = sum(math.hypot(*(g.coords[u] - g.coords[v])) for u, v in zip(path, path[1:]))
        assert length == pytest.approx(bf[a, b], abs=1e-9)


# -- stepping --------------------------------------------------------------------------------------

def test_step_stop_and_move():
    g = make_graph([[0, 0], [1, 0]], [(0, 1)])
    s = start_episode(g, 0, 5)
    stopped = step(s, STOP)
    assert stopped.done and stopped.node == 0 and stopped.steps_taken == 1
    moved = step(s, 1)
    assert moved.node == 1 and not moved.done


def test_t_max_one_finishes_on_any_move():
    g = make_graph([[0, 0], [1, 0]], [(0, 1)])
    assert step(start_episode(g, 0, 1), 1).done


def test_step_errors():
    g = make_graph([[0, 0], [1, 0]], [(0, 1)])
    s = start_episode(g, 0, 5)
    with pytest.raises(IndexError):
        step(s, 2)
    with pytest.raises(RuntimeError):
        step(step(s, STOP), 1)


def test_default_t_max():
    assert default_t_max(3) == 10
    assert default_t_max(7) == 14


# -- serialisation -------------------------------------------------------------------------------

def test_json_round_trip(tmp_path):
    g = generate_graph(12, 4, 8, np.random.default_rng(5), graph_id="env_x", seed=5)
    g.save(tmp_path / "g.json")
    h = NavGraph.load(tmp_path / "g.json")
    assert h.graph_id == "env_x" and h.edges == g.edges and h.directions == g.directions
    np.testing.assert_array_equal(h.coords, g.coords)
    for a, b in zip(g.features, h.features):
        np.testing.assert_array_equal(a, b)


def _mutate(d: dict, how: str) -> dict:
    d = json.loads(json.dumps(d))
    if how == "stop":
        d["features"]["0"]["0"] = [1.0] * d["feature_dim"]
    elif how == "disconnected":
        d["edges"] = [e for e in d["edges"] if 0 not in e]
    elif how == "self_loop":
        d["edges"].append([1, 1])
    elif how == "kmax":
        d["k_max"] = 1
    return d


@pytest.mark.parametrize("how", ["stop", "disconnected", "self_loop", "kmax"])
def test_loader_rejects_violations(how):
    g = generate_graph(10, 4, 8, np.random.default_rng(6))
    with pytest.raises(GraphValidationError):
        NavGraph.from_json(_mutate(g.to_json(), how)).validate()
