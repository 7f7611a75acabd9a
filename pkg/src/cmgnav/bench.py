"""Seeded desk-scale benchmark: synthetic graphs, episode splits and cached training runs.

Every run is keyed by its full configuration plus a hash of the package sources, so a
cached result is reused only when neither the settings nor the code have changed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import NavGraph, generate_graph, shortest_distance
from .episodes import Dataset, build_dataset
from .rng import substream
from .trainer import TrainConfig, Trainer

log = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent


@dataclass(frozen=True)
class BenchConfig:
    n_train_graphs: int = 10
    n_unseen_graphs: int = 2
    nodes: int = 40
    k_max: int = 5
    feature_dim: int = 32
    landmark_noise: float = 0.3
    n_train: int = 500
    n_val_seen: int = 100
    n_val_unseen: int = 100
    iterations: int = 3000
    seeds: tuple = (0, 1, 2, 3, 4)
    train_overrides: dict = field(default_factory=dict)

    def key_dict(self) -> dict:
        d = asdict(self)
        d.pop("seeds")
        return d


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.rglob("*.py")):
        h.update(p.relative_to(PACKAGE_DIR).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def build_benchmark(seed: int, cfg: BenchConfig = BenchConfig()) -> tuple[Dataset, dict[str, NavGraph]]:
    env_rng = substream(seed, "env")
    n = cfg.n_train_graphs + cfg.n_unseen_graphs
    graphs = [generate_graph(cfg.nodes, cfg.k_max, cfg.feature_dim, env_rng,
                             graph_id=f"env_{i:03d}", seed=seed, landmark_noise=cfg.landmark_noise)
              for i in range(n)]
    counts = {"train": cfg.n_train, "val_seen": cfg.n_val_seen, "val_unseen": cfg.n_val_unseen}
    ds = build_dataset(graphs, counts, substream(seed, "data"), n_unseen=cfg.n_unseen_graphs)
    return ds, {g.graph_id: g for g in graphs}


def mean_shortest_length(ds: Dataset, graphs: dict[str, NavGraph], split: str) -> float:
    return float(np.mean([shortest_distance(graphs[e.graph_id], e.start, e.goal)
                          for e in ds.split(split)]))


def run_config(regime: str, seed: int, cfg: BenchConfig, **train_kw) -> TrainConfig:
    kw = dict(regime=regime, seed=seed, iterations=cfg.iterations, eval_every=0,
              eval_splits=("val_unseen",)) | cfg.train_overrides | train_kw
    return TrainConfig(**kw)


def run_one(regime: str, seed: int, cfg: BenchConfig = BenchConfig(), cache_dir=None,
            **train_kw) -> dict:
    """Train one configuration and return its final val_unseen metrics (cached)."""
    tc = run_config(regime, seed, cfg, **train_kw)
    key_src = json.dumps({"bench": cfg.key_dict(), "seed": seed, "train": asdict(tc),
                          "src": source_hash()}, sort_keys=True, default=list)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:20]
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{regime}_s{seed}_{key}.json"
        if path.exists():
            return json.loads(path.read_text())
    ds, graphs = build_benchmark(seed, cfg)
    t0 = time.time()
    manifest = Trainer(tc, ds, graphs).run()
    result = {"regime": regime, "seed": seed, "interval": tc.interval, "grounding": tc.grounding,
              "seconds": time.time() - t0, "gt_length": mean_shortest_length(ds, graphs, "val_unseen")}
    result |= {k: manifest.final("val_unseen")[k] for k in ("NE", "SR", "SPL", "TL")}
    log.info("%s seed=%d interval=%d %s: SR=%.3f SPL=%.3f TL=%.2f (%.0fs)", regime, seed,
             tc.interval, tc.grounding, result["SR"], result["SPL"], result["TL"], result["seconds"])
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def run_grid(specs: list[dict], cfg: BenchConfig = BenchConfig(), cache_dir=None) -> list[dict]:
    """``specs`` are keyword dicts for ``run_one`` (regime plus any overrides), run per seed."""
    out = []
    for seed in cfg.seeds:
        for spec in specs:
            spec = dict(spec)
            out.append(run_one(spec.pop("regime"), seed, cfg, cache_dir, **spec))
    return out
