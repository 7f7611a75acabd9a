"""Command-line entry point: gen-env, gen-data, train, eval, plot, sweep.

Configuration is a flat JSON object with dotted keys (``train.lr_gen``, ``data.train``,
``seed`` ...).  Precedence is defaults < config file < command-line flags; ``--set
key=value`` counts as a flag.  Exit codes: 0 success, 1 usage error, 2 validation error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .env import STOP, GraphValidationError, NavGraph, generate_graph
from .episodes import SPLITS, Dataset, EpisodeError, build_dataset, file_hash
from .metrics import NavigatorAgent, OracleAgent, evaluate, score_paths
from .navigator import Navigator
from .rng import substream
from .trainer import (REGIMES, RunManifest, TrainConfig, metrics_csv, navigator_from_checkpoint,
                      read_checkpoint, save_checkpoint, train_regime)

log = logging.getLogger("cmgnav")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

_TRAIN_FIELDS = {f.name: f.default for f in dataclasses.fields(TrainConfig) if f.name != "seed"}

DEFAULTS: dict = {
    "seed": 0,
    "env.count": 12, "env.nodes": 40, "env.kmax": 5, "env.dim": 32, "env.landmarks": 20,
    "env.landmark_noise": 0.3,
    "data.train": 500, "data.val_seen": 100, "data.val_unseen": 100, "data.unseen_graphs": 2,
    "data.min_hops": 3, "data.max_hops": 7,
    "eval.splits": ["val_seen", "val_unseen"], "eval.d_th": 3.0,
} | {f"train.{k}": (list(v) if isinstance(v, tuple) else v) for k, v in _TRAIN_FIELDS.items()}

# CLI spelling -> internal regime name
REGIME_ALIASES = {"alternate": "alternate_only"}


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a flat JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        cfg.update(loaded)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(value)
    for key, value in getattr(args, "_flag_keys", {}).items():
        if value is not None:
            cfg[key] = value
    if "train.regime" in cfg:
        cfg["train.regime"] = REGIME_ALIASES.get(cfg["train.regime"], cfg["train.regime"])
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    kw = {k[len("train."):]: v for k, v in cfg.items() if k.startswith("train.")}
    kw["eval_splits"] = tuple(kw["eval_splits"])
    try:
        return TrainConfig(seed=int(cfg["seed"]), **kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


# -- shared I/O -------------------------------------------------------------------------------

def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {p} is not writable: {exc}") from exc
    return p


def env_files(env_dir) -> list[Path]:
    files = sorted(Path(env_dir).glob("env_*.json"))
    if not files:
        raise ValidationError(f"no env_*.json files in {env_dir}")
    return files


def load_graphs(env_dir) -> dict[str, NavGraph]:
    graphs = {}
    for f in env_files(env_dir):
        g = NavGraph.load(f)
        g.validate()
        graphs[g.graph_id] = g
    return graphs


def load_dataset(data_dir) -> Dataset:
    path = Path(data_dir) / "episodes.jsonl"
    if not path.exists():
        raise ValidationError(f"missing {path}")
    return Dataset.load(path)


def dataset_hashes(env_dir, data_dir) -> dict:
    out = {f"env/{f.name}": file_hash(f) for f in env_files(env_dir)}
    for name in ("episodes.jsonl", "vocab.json"):
        out[f"data/{name}"] = file_hash(Path(data_dir) / name)
    return out


def update_index(out_dir: Path, manifest_path: Path, cfg: dict) -> None:
    """Index of runs keyed by manifest content hash, kept beside the run directories."""
    index_path = out_dir.parent / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    index[file_hash(manifest_path)] = {
        "manifest": str(manifest_path.relative_to(out_dir.parent)),
        "regime": cfg["train.regime"], "interval": cfg["train.interval"], "seed": cfg["seed"]}
    index_path.write_text(json.dumps(index, sort_keys=True, indent=1))


# -- subcommands ---------------------------------------------------------------------------------

def cmd_gen_env(args, cfg) -> int:
    out = _out_dir(args.out)
    n = int(cfg["env.nodes"])
    if n < 2:
        raise ValidationError("--nodes must be >= 2")
    k_max = min(int(cfg["env.kmax"]), n - 1)
    rng = substream(int(cfg["seed"]), "env")
    for i in range(int(cfg["env.count"])):
        g = generate_graph(n, k_max, int(cfg["env.dim"]), rng, n_landmarks=int(cfg["env.landmarks"]),
                           landmark_noise=float(cfg["env.landmark_noise"]), graph_id=f"env_{i:03d}",
                           seed=int(cfg["seed"]))
        path = out / f"{g.graph_id}.json"
        g.save(path)
        print(f"{file_hash(path)}  {path.name}")
    return EXIT_OK


def cmd_gen_data(args, cfg) -> int:
    graphs = [NavGraph.load(f) for f in env_files(args.env)]
    counts = {"train": int(cfg["data.train"]), "val_seen": int(cfg["data.val_seen"]),
              "val_unseen": int(cfg["data.val_unseen"])}
    n_unseen = int(cfg["data.unseen_graphs"])
    if counts["val_unseen"] > 0 and n_unseen >= len(graphs):
        raise ValidationError(f"{len(graphs)} graphs cannot supply {n_unseen} held-out graphs "
                              "and at least one training graph")
    out = _out_dir(args.out)
    ds = build_dataset(graphs, counts, substream(int(cfg["seed"]), "data"), n_unseen=n_unseen,
                       min_hops=int(cfg["data.min_hops"]), max_hops=int(cfg["data.max_hops"]))
    ds.save(out / "episodes.jsonl")
    for name in ("episodes.jsonl", "vocab.json"):
        print(f"{file_hash(out / name)}  {name}")
    return EXIT_OK


def _train_run(args, cfg, out: Path) -> Path:
    tc = train_config(cfg)
    graphs = load_graphs(args.env)
    ds = load_dataset(args.data)
    manifest = RunManifest(config=dict(sorted(cfg.items())),
                           dataset_hashes=dataset_hashes(args.env, args.data))
    if getattr(args, "workers", 1) > 1:
        log.warning("training rollouts run in a single worker; --workers applies to eval only")
    trainer, manifest = train_regime(tc, ds, graphs, out_dir=out, manifest=manifest)
    ckpt = save_checkpoint(out / "checkpoint.json", trainer)
    manifest.checkpoint = ckpt.name
    manifest.save(out / "manifest.json")
    (out / "metrics.csv").write_text(metrics_csv(manifest))
    update_index(out, out / "manifest.json", cfg)
    return out / "manifest.json"


def cmd_train(args, cfg) -> int:
    train_config(cfg)  # reject bad combinations before any compute
    path = _train_run(args, cfg, _out_dir(args.out))
    print(f"{file_hash(path)}  {path}")
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    intervals = [int(v) for v in args.intervals.split(",")]
    if not intervals or min(intervals) < 1:
        raise ValidationError("--intervals must be positive integers")
    for k in intervals:
        train_config(cfg | {"train.interval": k})
    root = _out_dir(args.out)
    for k in intervals:
        path = _train_run(args, cfg | {"train.interval": k}, _out_dir(root / f"interval_{k}"))
        print(f"{file_hash(path)}  {path}")
    return EXIT_OK


def _check_widths(nav: Navigator, ds: Dataset, graphs: dict[str, NavGraph]) -> None:
    c = nav.config
    if c.vocab_size != len(ds.vocab):
        raise ValidationError(f"checkpoint vocabulary {c.vocab_size} != dataset vocabulary {len(ds.vocab)}")
    for g in graphs.values():
        if g.feature_dim != c.feature_dim or g.k_max > c.k_max:
            raise ValidationError(f"{g.graph_id}: feature width {g.feature_dim} / k_max {g.k_max} "
                                  f"incompatible with checkpoint ({c.feature_dim}, {c.k_max})")


def _navigate_chunk(payload):
    ckpt, episodes, graphs = payload
    agent = NavigatorAgent(navigator_from_checkpoint(ckpt))
    paths = agent.navigate(episodes, graphs)
    return paths, [row for r in agent.last_records for row in r.dump_rows()]


def cmd_eval(args, cfg) -> int:
    graphs = load_graphs(args.env)
    ds = load_dataset(args.data)
    splits = args.splits.split(",") if args.splits else list(cfg["eval.splits"])
    bad = sorted(set(splits) - set(SPLITS))
    if bad:
        raise UsageError(f"unknown splits {bad}")
    if not args.oracle and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --oracle")
    ckpt = None
    if not args.oracle:
        try:
            ckpt = read_checkpoint(args.checkpoint)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise ValidationError(str(exc)) from exc
        _check_widths(navigator_from_checkpoint(ckpt), ds, graphs)
    out = _out_dir(args.out)
    dump_rows = []
    for split in splits:
        episodes = ds.split(split)
        if args.oracle:
            res = evaluate(OracleAgent(), episodes, graphs, float(cfg["eval.d_th"]))
        else:
            size = max(1, -(-len(episodes) // max(1, args.workers)))
            chunks = [(ckpt, episodes[i:i + size], graphs) for i in range(0, len(episodes), size)]
            if args.workers > 1 and len(chunks) > 1:
                with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
                    parts = list(pool.map(_navigate_chunk, chunks))
            else:
                parts = [_navigate_chunk(c) for c in chunks]
            paths = [p for ps, _ in parts for p in ps]
            dump_rows += [row for _, rows in parts for row in rows]
            res = score_paths(episodes, paths, graphs, float(cfg["eval.d_th"]))
        (out / f"{split}.csv").write_text(res.to_csv())
        (out / f"{split}.json").write_text(res.to_json())
        agg = res.aggregates()
        print(f"{split}: NE={agg['NE']:.4f} SR={agg['SR']:.4f} SPL={agg['SPL']:.4f} "
              f"TL={agg['TL']:.4f} N={agg['N']}")
    if args.traj_dump:
        if args.oracle:
            raise UsageError("--traj-dump needs a trained checkpoint")
        Path(args.traj_dump).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in dump_rows))
    return EXIT_OK


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def cmd_plot(args, cfg) -> int:
    if not args.manifests and not args.traj_dump:
        raise ValidationError("plot: empty input set")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(args.out)
    manifests = []
    for m in args.manifests or []:
        try:
            manifests.append((Path(m), json.loads(Path(m).read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read manifest {m}: {exc}") from exc
    split = args.split
    for i, (path, man) in enumerate(manifests):
        rows = [r for r in man["metrics"] if r["split"] == split]
        if not rows:
            raise ValidationError(f"{path}: no {split} metric rows")
        table = [[r["iteration"], r["SPL"], r["SR"], r["TL"]] for r in rows]
        stem = f"spl_vs_iteration_{i:02d}"
        _write_table(out / f"{stem}.csv", ["iteration", "SPL", "SR", "TL"], table)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r[0] for r in table], [r[1] for r in table], marker="o")
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"SPL ({split})")
        ax.set_title(path.parent.name or path.name)
        fig.tight_layout()
        fig.savefig(out / f"{stem}.png", dpi=100)
        plt.close(fig)
    intervals = {}
    for _, man in manifests:
        k = man["config"].get("train.interval", man["config"].get("interval"))
        final = [r for r in man["metrics"] if r["split"] == split][-1]
        intervals.setdefault(int(k), []).append(final["SPL"])
    if len(intervals) > 1:
        table = [[k, float(np.mean(v)), len(v)] for k, v in sorted(intervals.items())]
        _write_table(out / "spl_vs_interval.csv", ["interval", "SPL", "runs"], table)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r[0] for r in table], [r[1] for r in table], marker="o")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("alternation interval")
        ax.set_ylabel(f"final SPL ({split})")
        fig.tight_layout()
        fig.savefig(out / "spl_vs_interval.png", dpi=100)
        plt.close(fig)
    if args.traj_dump:
        if not args.env:
            raise UsageError("trajectory overlays need --env")
        graphs = load_graphs(args.env)
        by_episode: dict[str, list[dict]] = {}
        for line in Path(args.traj_dump).read_text().splitlines():
            if line.strip():
                row = json.loads(line)
                by_episode.setdefault(row["episode_id"], []).append(row)
        if not by_episode:
            raise ValidationError("plot: empty trajectory dump")
        for eid in sorted(by_episode)[:args.max_episodes]:
            steps = sorted(by_episode[eid], key=lambda r: r["t"])
            g = graphs[steps[0]["graph_id"]]
            nodes = [s["node"] for s in steps]
            if steps[-1]["action"] != STOP:
                # the run ended on a move at the step limit
                nodes.append(g.neighbor(nodes[-1], steps[-1]["action"]))
            xy = g.coords[nodes]
            _write_table(out / f"traj_{eid}.csv", ["t", "node", "x", "y", "action"],
                         [[s["t"], s["node"], *map(float, g.coords[s["node"]]), s["action"]] for s in steps])
            fig, ax = plt.subplots(figsize=(5, 5))
            for a, b in g.edges:
                ax.plot(*g.coords[[a, b]].T, color="0.85", lw=0.8, zorder=1)
            ax.scatter(*g.coords.T, s=8, color="0.5", zorder=2)
            ax.plot(*xy.T, color="tab:red", lw=2, marker="o", ms=3, zorder=3)
            ax.set_aspect("equal")
            ax.set_title(eid)
            fig.tight_layout()
            fig.savefig(out / f"traj_{eid}.png", dpi=100)
            plt.close(fig)
    print(f"wrote plots to {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------------

class _FlagKey(argparse.Action):
    """Store the flag value under its dotted config key so it can override the file."""

    def __call__(self, parser, namespace, values, option_string=None):
        keys = dict(getattr(namespace, "_flag_keys", {}) or {})
        keys[self.metavar] = values
        namespace._flag_keys = keys


def _flag(p, name, key, typ, help_text, choices=None):
    p.add_argument(name, action=_FlagKey, metavar=key, type=typ, choices=choices, help=help_text)


def _common(p):
    p.add_argument("--config", help="flat JSON config with dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override")
    _flag(p, "--seed", "seed", int, "root seed for every random substream")
    p.set_defaults(_flag_keys={})


def _train_flags(p):
    p.add_argument("--env", required=True, help="directory of env_*.json files")
    p.add_argument("--data", required=True, help="directory holding episodes.jsonl and vocab.json")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--workers", type=int, default=1)
    _flag(p, "--regime", "train.regime", str, "training regime",
          choices=sorted(set(REGIMES) | set(REGIME_ALIASES)))
    _flag(p, "--interval", "train.interval", int, "iterations per mode before alternating")
    _flag(p, "--iters", "train.iterations", int, "training iterations")
    _flag(p, "--batch", "train.batch_size", int, "episodes per batch")
    _flag(p, "--lr-gen", "train.lr_gen", float, "navigator learning rate")
    _flag(p, "--lr-dis", "train.lr_dis", float, "discriminator learning rate")
    _flag(p, "--behavior", "train.behavior", str, "discriminator input",
          choices=["hidden", "hidden+logits"])
    _flag(p, "--grounding", "train.grounding", str, "grounding variant",
          choices=["cmg", "historical", "mutual"])
    _flag(p, "--dropout", "train.dropout", float, "feature dropout ratio")
    _flag(p, "--eval-every", "train.eval_every", int, "evaluation cadence in iterations")
    _flag(p, "--checkpoint-every", "train.checkpoint_every", int, "checkpoint cadence in iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmgnav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-env", help="write synthetic environment files")
    _common(p)
    p.add_argument("--out", required=True)
    _flag(p, "--count", "env.count", int, "number of graphs")
    _flag(p, "--nodes", "env.nodes", int, "nodes per graph")
    _flag(p, "--kmax", "env.kmax", int, "maximum navigable directions per node")
    _flag(p, "--dim", "env.dim", int, "direction feature width")
    _flag(p, "--landmark-noise", "env.landmark_noise", float, "landmark feature noise scale")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("gen-data", help="generate episodes and vocabulary")
    _common(p)
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    _flag(p, "--train", "data.train", int, "training episodes")
    _flag(p, "--val-seen", "data.val_seen", int, "val_seen episodes")
    _flag(p, "--val-unseen", "data.val_unseen", int, "val_unseen episodes")
    _flag(p, "--unseen-graphs", "data.unseen_graphs", int, "graphs held out for val_unseen")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a navigator")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per alternation interval")
    _common(p)
    _train_flags(p)
    p.add_argument("--intervals", default="1,2,4,8,16,32")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the oracle baseline")
    _common(p)
    p.add_argument("--env", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score the shortest-path oracle instead")
    p.add_argument("--splits", help="comma-separated splits")
    p.add_argument("--traj-dump", help="write per-step trajectory/attention JSONL here")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render SPL curves and trajectory overlays")
    _common(p)
    p.add_argument("--manifests", nargs="*", default=[])
    p.add_argument("--traj-dump")
    p.add_argument("--env")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val_unseen")
    p.add_argument("--max-episodes", type=int, default=10)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        cfg = effective_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, GraphValidationError, EpisodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - mapped onto the runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
