"""Navigation error, success rate, SPL and trajectory length."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .autodiff.tensor import no_grad
from .env import STOP, NavGraph, default_t_max, oracle_action, shortest_distance, start_episode, step
from .episodes import Episode

SUCCESS_DISTANCE = 3.0


def navigation_error(final: int, goal: int, g: NavGraph) -> float:
    return shortest_distance(g, final, goal)


def success(final: int, goal: int, g: NavGraph, d_th: float = SUCCESS_DISTANCE) -> bool:
    if d_th <= 0:
        raise ValueError("d_th must be positive")
    return navigation_error(final, goal, g) <= d_th


def path_length(g: NavGraph, nodes: Sequence[int]) -> float:
    """Summed edge weights along ``nodes``; repeated nodes (STOP) add nothing."""
    total = 0.0
    for a, b in zip(nodes, nodes[1:]):
        if a == b:
            continue
        if b not in g.directions[a]:
            raise ValueError(f"trajectory jumps between non-adjacent nodes {a} and {b}")
        total += g.weight(a, b)
    return total


def spl_term(succeeded: bool, shortest: float, taken: float) -> float:
    if not succeeded:
        return 0.0
    if shortest == 0.0:
        return 1.0
    return shortest / max(taken, shortest)


@dataclass
class EpisodeRow:
    episode_id: str
    graph_id: str
    final_node: int
    d_final: float
    success: bool
    l: float          # shortest start-goal distance
    a: float          # length actually travelled

    @property
    def spl(self) -> float:
        return spl_term(self.success, self.l, self.a)


def spl(rows: Sequence[EpisodeRow]) -> float:
    return float(np.mean([r.spl for r in rows])) if rows else 0.0


@dataclass
class EvalResult:
    rows: list[EpisodeRow] = field(default_factory=list)
    NE: float = 0.0
    SR: float = 0.0
    SPL: float = 0.0
    TL: float = 0.0

    @classmethod
    def from_rows(cls, rows: list[EpisodeRow]) -> "EvalResult":
        if not rows:
            return cls()
        return cls(rows,
                   NE=float(np.mean([r.d_final for r in rows])),
                   SR=float(np.mean([r.success for r in rows])),
                   SPL=spl(rows),
                   TL=float(np.mean([r.a for r in rows])))

    def aggregates(self) -> dict:
        return {"NE": self.NE, "SR": self.SR, "SPL": self.SPL, "TL": self.TL, "N": len(self.rows)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode_id", "graph_id", "final_node", "d_final", "success", "l", "a", "spl"])
        for r in self.rows:
            w.writerow([r.episode_id, r.graph_id, r.final_node, repr(r.d_final), int(r.success),
                        repr(r.l), repr(r.a), repr(r.spl)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.aggregates(), sort_keys=True, indent=1)


def score_paths(episodes: Sequence[Episode], paths: Sequence[Sequence[int]],
                graphs: dict[str, NavGraph], d_th: float = SUCCESS_DISTANCE) -> EvalResult:
    """Score executed node sequences against their episodes."""
    rows = []
    for e, nodes in zip(episodes, paths, strict=True):
        g = graphs[e.graph_id]
        if nodes[0] != e.start:
            raise ValueError(f"{e.episode_id}: trajectory does not begin at the start node")
        final = nodes[-1]
        d = navigation_error(final, e.goal, g)
        rows.append(EpisodeRow(e.episode_id, e.graph_id, int(final), d, d <= d_th,
                               shortest_distance(g, e.start, e.goal), path_length(g, nodes)))
    return EvalResult.from_rows(rows)


class Agent(Protocol):
    def navigate(self, episodes: Sequence[Episode], graphs: dict[str, NavGraph]) -> list[list[int]]:
        ...


def _walk(e: Episode, g: NavGraph, choose) -> list[int]:
    state = start_episode(g, e.start, default_t_max(e.hops))
    nodes = [e.start]
    while not state.done:
        a = choose(state)
        state = step(state, a)
        if a != STOP:
            nodes.append(state.node)
    return nodes


class OracleAgent:
    def navigate(self, episodes, graphs):
        return [_walk(e, graphs[e.graph_id], lambda s, e=e: oracle_action(s.graph, s.node, e.goal))
                for e in episodes]


class StopAgent:
    def navigate(self, episodes, graphs):
        return [[e.start] for e in episodes]


class RandomAgent:
    """Uniform over every direction, STOP included, at each step."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def navigate(self, episodes, graphs):
        return [_walk(e, graphs[e.graph_id],
                      lambda s: int(self.rng.integers(s.graph.n_directions(s.node))))
                for e in episodes]


class NavigatorAgent:
    """Greedy decoding with a trained navigator, in fixed-size batches."""

    def __init__(self, navigator, batch_size: int = 64):
        self.navigator = navigator
        self.batch_size = batch_size
        self.last_records = []

    def navigate(self, episodes, graphs):
        self.last_records = []
        with no_grad():
            for i in range(0, len(episodes), self.batch_size):
                chunk = episodes[i:i + self.batch_size]
                out = self.navigator.rollout(chunk, graphs, "greedy", record=True)
                self.last_records.extend(out.records)
        return [r.nodes for r in self.last_records]


def evaluate(agent: Agent, episodes: Sequence[Episode], graphs: dict[str, NavGraph],
             d_th: float = SUCCESS_DISTANCE) -> EvalResult:
    return score_paths(episodes, agent.navigate(list(episodes), graphs), graphs, d_th)


def rows_as_dicts(result: EvalResult) -> list[dict]:
    return [asdict(r) | {"spl": r.spl} for r in result.rows]
