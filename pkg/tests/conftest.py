import math

import numpy as np
import pytest

from cmgnav.env import NavGraph, generate_graph
from cmgnav.episodes import build_dataset
from cmgnav.navigator import Navigator, NavigatorConfig


def make_world(n_graphs=3, nodes=12, k_max=4, dim=8, counts=None, seed=0):
    rng = np.random.default_rng(seed)
    gs = [generate_graph(nodes, k_max, dim, rng, graph_id=f"env_{i:03d}") for i in range(n_graphs)]
    counts = counts or {"train": 12, "val_seen": 4, "val_unseen": 4}
    ds = build_dataset(gs, counts, np.random.default_rng(seed + 1), n_unseen=1)
    return {g.graph_id: g for g in gs}, ds


def tiny_navigator(ds, k_max=4, dim=8, grounding="cmg", seed=0, **kw):
    cfg = NavigatorConfig(vocab_size=len(ds.vocab), feature_dim=dim, k_max=k_max, word_dim=6,
                          enc_hidden=4, model_dim=8, dec_hidden=8, action_dim=5, grounding=grounding, **kw)
    return Navigator(cfg, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def world():
    return make_world()


def brute_force_distances(g: NavGraph) -> np.ndarray:
    """Minimum weight over every simple path, by exhaustive DFS."""
    n = g.n_nodes
    best = np.full((n, n), math.inf)

    def dfs(src, node, length, seen):
        best[src, node] = min(best[src, node], length)
        for nb in g.directions[node]:
            if nb not in seen:
                w = math.hypot(*(g.coords[node] - g.coords[nb]))
                dfs(src, nb, length + w, seen | {nb})
    for s in range(n):
        dfs(s, s, 0.0, {s})
    return best


def pytest_terminal_summary(terminalreporter):
    lines = [v for key in ("passed", "failed") for rep in terminalreporter.stats.get(key, [])
             if rep.when == "call" for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
