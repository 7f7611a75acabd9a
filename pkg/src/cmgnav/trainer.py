"""Training regimes: teacher, student, alternate, professor and alternate adversarial.

The alternate adversarial regime follows this per-iteration order:

1. roll out the batch teacher-forced and student-forced, keeping both tapes;
2. in a teacher-forcing iteration (stage 1): step the generator on the teacher
   NLL, step the discriminator with teacher behaviour labelled positive, then
   step the generator on -log D(student behaviour) with D frozen;
3. in a student-forcing iteration (stage 2): step the generator on the student
   NLL, step the discriminator with student behaviour labelled positive, then
   step the generator on -log(1 - D(teacher behaviour)).

The mode flips after every ``interval`` iterations, starting with teacher-forcing.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, backward, frozen, no_grad
from .discriminator import (Discriminator, DiscriminatorConfig, accuracy, discriminator_loss,
                            generator_fooling_loss)
from .env import NavGraph
from .episodes import Dataset, Episode
from .metrics import NavigatorAgent, evaluate
from .navigator import Navigator, NavigatorConfig, Rollout
from .rng import restore_rng, rng_state, substream

log = logging.getLogger(__name__)

REGIMES = ("aal", "teacher", "student", "professor", "alternate_only")
BEHAVIORS = ("hidden", "hidden+logits")
TEACHER, STUDENT = "teacher", "student"


@dataclass
class TrainConfig:
    regime: str = "aal"
    interval: int = 1
    batch_size: int = 16
    lr_gen: float = 1e-3
    lr_dis: float = 1e-3
    iterations: int = 3000
    dropout: float = 0.4
    seed: int = 0
    eval_every: int = 500
    eval_splits: tuple = ("val_seen", "val_unseen")
    behavior: str = "hidden"
    grounding: str = "cmg"
    max_grad_norm: float | None = None
    gen_loss_weight: float = 1.0
    checkpoint_every: int | None = None
    trace: bool = False
    word_dim: int = 32
    enc_hidden: int = 32
    model_dim: int = 64
    dec_hidden: int = 64
    action_dim: int = 16
    disc_hidden: int = 32
    disc_mlp: int = 64

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.lr_gen <= 0 or self.lr_dis <= 0:
            raise ValueError("learning rates must be positive")
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"behavior must be one of {BEHAVIORS}")
        self.eval_splits = tuple(self.eval_splits)

    @property
    def alternating(self) -> bool:
        return self.regime in ("aal", "alternate_only")

    @property
    def adversarial(self) -> bool:
        return self.regime in ("aal", "professor")


# Widths and optimiser settings as reported for the full-scale model.
FULL_SCALE_PRESET = dict(lr_gen=1e-4, lr_dis=1e-4, batch_size=64, word_dim=256, enc_hidden=256,
                    model_dim=512, dec_hidden=512, disc_hidden=256, disc_mlp=512)


def mode_for_iteration(i: int, interval: int) -> str:
    """Training mode of 1-based iteration ``i``: teacher iff floor((i-1)/interval) is even."""
    return TEACHER if ((i - 1) // interval) % 2 == 0 else STUDENT


@dataclass
class UpdateEvent:
    iteration: int
    mode: str
    model: str          # "G" or "D"
    loss: str           # nll_tf, nll_sf, l_dis, l_gen
    stage: int | None
    sources: tuple      # rollouts whose tape the applied gradient came through

    def as_tuple(self) -> tuple:
        return (self.iteration, self.mode, self.model, self.loss, self.stage, self.sources)


@dataclass
class RunManifest:
    config: dict
    dataset_hashes: dict = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    train_log: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))

    def final(self, split: str) -> dict:
        rows = [r for r in self.metrics if r["split"] == split]
        return rows[-1] if rows else {}


METRIC_COLUMNS = ("iteration", "split", "NE", "SR", "SPL", "TL", "nll_tf", "nll_sf", "l_dis", "l_gen", "mode")


def metrics_csv(manifest: RunManifest) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in manifest.metrics:
        lines.append(",".join("" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float)
                              else str(r[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def build_models(config: TrainConfig, vocab_size: int, feature_dim: int, k_max: int):
    init = substream(config.seed, "init")
    nav = Navigator(NavigatorConfig(
        vocab_size=vocab_size, feature_dim=feature_dim, k_max=k_max, word_dim=config.word_dim,
        enc_hidden=config.enc_hidden, model_dim=config.model_dim, dec_hidden=config.dec_hidden,
        action_dim=config.action_dim, grounding=config.grounding), init)
    width = config.dec_hidden + (k_max + 1 if config.behavior == "hidden+logits" else 0)
    disc = Discriminator(DiscriminatorConfig(input_dim=width, summary_hidden=config.disc_hidden,
                                             mlp_hidden=config.disc_mlp), init)
    return nav, disc


def sequence_nll(distributions, targets) -> float:
    """sum_t -log p_t[y_t]."""
    if len(distributions) != len(targets):
        raise ValueError("every step needs a supervision target")
    return float(sum(-np.log(p[y]) for p, y in zip(distributions, targets)))


def nll_loss(record) -> float:
    """Summed NLL of one trajectory against its oracle supervision."""
    if len(record.supervision) != len(record.actions) or any(y is None for y in record.supervision):
        raise ValueError("trajectory is missing supervision")
    if record.steps:
        return sequence_nll([s.p for s in record.steps], [s.supervision for s in record.steps])
    return record.nll


class Trainer:
    def __init__(self, config: TrainConfig, dataset: Dataset, graphs: dict[str, NavGraph],
                 navigator: Navigator | None = None, discriminator: Discriminator | None = None):
        self.config = config
        self.dataset = dataset
        self.graphs = graphs
        any_graph = next(iter(graphs.values()))
        k_max = max(g.k_max for g in graphs.values())
        if navigator is None or discriminator is None:
            nav, disc = build_models(config, len(dataset.vocab), any_graph.feature_dim, k_max)
            navigator = navigator or nav
            discriminator = discriminator or disc
        self.nav = navigator
        self.disc = discriminator
        self.gen_opt = Adam(self.nav.params, lr=config.lr_gen, max_norm=config.max_grad_norm)
        self.dis_opt = Adam(self.disc.params, lr=config.lr_dis, max_norm=config.max_grad_norm)
        self.rngs = {name: substream(config.seed, name)
                     for name in ("batch", "sampling", "dropout", "disc")}
        self.iteration = 0
        self.events: list[UpdateEvent] = []
        self._order: list[int] = []
        if config.interval != 1 and not config.alternating:
            warnings.warn(f"interval={config.interval} ignored for regime {config.regime!r}")

    # -- pieces ----------------------------------------------------------------------------

    def sample_batch(self) -> list[Episode]:
        train = self.dataset.split("train")
        out = []
        while len(out) < min(self.config.batch_size, len(train)):
            if not self._order:
                self._order = list(self.rngs["batch"].permutation(len(train)))
            out.append(train[self._order.pop()])
        return out

    def rollout(self, batch, mode: str, encoded=None) -> Rollout:
        return self.nav.rollout(batch, self.graphs, mode, rng=self.rngs["sampling"],
                                dropout=self.config.dropout, dropout_rng=self.rngs["dropout"],
                                keep_outputs=self.config.behavior == "hidden+logits",
                                encoded=encoded)

    def both_rollouts(self, batch) -> tuple[Rollout, Rollout]:
        # one shared encoder graph; both rollouts see identical parameters
        enc = self.nav.encode_episodes(batch)
        return self.rollout(batch, TEACHER, enc), self.rollout(batch, STUDENT, enc)

    def behavior(self, r: Rollout, detach: bool = False) -> list[Tensor]:
        seq = r.hidden
        if self.config.behavior == "hidden+logits":
            seq = [ops.concat([h, o], axis=-1) for h, o in zip(r.hidden, r.outputs)]
        return [s.detach() for s in seq] if detach else seq

    def discriminate(self, seq, r: Rollout) -> Tensor:
        return self.disc.discriminate(seq, r.step_mask, train=True, rng=self.rngs["disc"])

    def _apply(self, opt: Adam, loss: Tensor, model: str, name: str, mode: str,
               stage: int | None, sources: dict, weight: float = 1.0) -> float:
        opt.zero_grad()
        if weight != 1.0:
            loss = ops.mul(loss, weight)
        grads = backward(loss)
        reached = tuple(sorted(tag for tag, seq in sources.items()
                               if any(id(t) in grads for t in seq)))
        opt.step()
        opt.zero_grad()
        if self.config.trace:
            self.events.append(UpdateEvent(self.iteration, mode, model, name, stage, reached))
        return loss.item()

    # -- regimes -----------------------------------------------------------------------------

    def train_step_aal(self, batch, mode: str) -> dict:
        """One alternate adversarial iteration; returns losses and the next mode."""
        tf, sf = self.both_rollouts(batch)
        return self._adversarial_update(tf, sf, mode, stage=1 if mode == TEACHER else 2) | {
            "next_mode": mode_for_iteration(self.iteration + 1, self.config.interval)}

    def _adversarial_update(self, tf: Rollout, sf: Rollout, mode: str, stage: int) -> dict:
        tags = {"tf": tf.hidden, "sf": sf.hidden}
        nll = tf.nll if stage == 1 else sf.nll
        out = {"nll_tf": tf.nll.item(), "nll_sf": sf.nll.item(), "mode": mode}
        self._apply(self.gen_opt, nll, "G", "nll_tf" if stage == 1 else "nll_sf", mode, stage, tags)

        beh_tf, beh_sf = self.behavior(tf, detach=True), self.behavior(sf, detach=True)
        p_tf = self.discriminate(beh_tf, tf)
        p_sf = self.discriminate(beh_sf, sf)
        l_dis = discriminator_loss(p_tf, p_sf, stage)
        out["l_dis"] = self._apply(self.dis_opt, l_dis, "D", "l_dis", mode, stage,
                                   {"tf": [p_tf], "sf": [p_sf]})
        out["d_acc"] = accuracy(p_tf.data, p_sf.data) if stage == 1 else accuracy(p_sf.data, p_tf.data)

        with frozen(self.disc.params.values()):
            fool = sf if stage == 1 else tf
            p = self.discriminate(self.behavior(fool), fool)
            l_gen = generator_fooling_loss(p, stage)
            out["l_gen"] = self._apply(self.gen_opt, l_gen, "G", "l_gen", mode, stage, tags,
                                       weight=self.config.gen_loss_weight)
        return out

    def train_iteration(self) -> dict:
        self.iteration += 1
        c = self.config
        i = self.iteration
        batch = self.sample_batch()
        if c.regime == "aal":
            return self.train_step_aal(batch, mode_for_iteration(i, c.interval))
        if c.regime == "professor":
            tf, sf = self.both_rollouts(batch)
            return self._adversarial_update(tf, sf, TEACHER, stage=1)
        if c.regime == "teacher":
            mode = TEACHER
        elif c.regime == "student":
            mode = STUDENT
        else:
            mode = mode_for_iteration(i, c.interval)
        r = self.rollout(batch, mode)
        name = "nll_tf" if mode == TEACHER else "nll_sf"
        tag = "tf" if mode == TEACHER else "sf"
        loss = self._apply(self.gen_opt, r.nll, "G", name, mode, None, {tag: r.hidden})
        return {name: loss, "mode": mode}

    # -- evaluation and the run loop ------------------------------------------------------------

    def evaluate_split(self, split: str):
        return evaluate(NavigatorAgent(self.nav), self.dataset.split(split), self.graphs)

    def run(self, manifest: RunManifest | None = None, out_dir=None) -> RunManifest:
        c = self.config
        manifest = manifest or RunManifest(config=asdict(c))
        window: list[dict] = []
        for _ in range(self.iteration, c.iterations):
            losses = self.train_iteration()
            entry = {"iteration": self.iteration} | {k: v for k, v in losses.items()
                                                     if k != "next_mode"}
            manifest.train_log.append(entry)
            window.append(entry)
            last = self.iteration == c.iterations
            if (c.eval_every and self.iteration % c.eval_every == 0) or last:
                self._record_eval(manifest, window)
                window = []
            if out_dir and c.checkpoint_every and self.iteration % c.checkpoint_every == 0:
                manifest.checkpoint = str(save_checkpoint(Path(out_dir) / f"ckpt_{self.iteration:06d}.json", self))
        if c.iterations == 0:
            self._record_eval(manifest, [])
        return manifest

    def _record_eval(self, manifest: RunManifest, window: list[dict]) -> None:
        def avg(key):
            vals = [w[key] for w in window if key in w]
            return float(np.mean(vals)) if vals else None
        for split in self.config.eval_splits:
            if not self.dataset.split(split):
                continue
            res = self.evaluate_split(split)
            row = {"iteration": self.iteration, "split": split} | {
                k: v for k, v in res.aggregates().items() if k != "N"}
            row |= {"nll_tf": avg("nll_tf"), "nll_sf": avg("nll_sf"),
                    "mode": window[-1]["mode"] if window else None}
            if self.config.adversarial:
                row |= {"l_dis": avg("l_dis"), "l_gen": avg("l_gen")}
            manifest.metrics.append(row)
            log.info("iter %d %s SR=%.3f SPL=%.3f TL=%.2f", self.iteration, split,
                     row["SR"], row["SPL"], row["TL"])


def train_regime(config: TrainConfig, dataset: Dataset, graphs: dict[str, NavGraph],
                 models: tuple[Navigator, Discriminator] | None = None, out_dir=None,
                 manifest: RunManifest | None = None) -> tuple[Trainer, RunManifest]:
    """Run the configured regime to completion; returns the trainer and its manifest."""
    nav, disc = models if models is not None else (None, None)
    trainer = Trainer(config, dataset, graphs, nav, disc)
    return trainer, trainer.run(manifest, out_dir)


def train_discriminator_only(trainer: Trainer, steps: int, held_out: list[Episode]) -> list[float]:
    """Stage-1 discriminator updates against the trainer's frozen navigator.

    Returns held-out tf-vs-sf accuracy after every step.
    """
    def behaviours(batch):
        with no_grad():
            tf, sf = trainer.both_rollouts(batch)
        return (trainer.behavior(tf, detach=True), tf), (trainer.behavior(sf, detach=True), sf)

    (h_tf, r_tf), (h_sf, r_sf) = behaviours(held_out)
    curve = []
    for _ in range(steps):
        (b_tf, tf), (b_sf, sf) = behaviours(trainer.sample_batch())
        loss = discriminator_loss(trainer.discriminate(b_tf, tf), trainer.discriminate(b_sf, sf), 1)
        trainer.dis_opt.zero_grad()
        backward(loss)
        trainer.dis_opt.step()
        with no_grad():
            p_tf = trainer.disc.discriminate(h_tf, r_tf.step_mask)
            p_sf = trainer.disc.discriminate(h_sf, r_sf.step_mask)
        curve.append(accuracy(p_tf.data, p_sf.data))
    return curve


def next_action_accuracy(nav: Navigator, episodes, graphs) -> float:
    """Fraction of greedy decisions that equal the oracle action at the visited node."""
    agent = NavigatorAgent(nav)
    agent.navigate(episodes, graphs)
    hits = [a == y for r in agent.last_records for a, y in zip(r.actions, r.supervision)]
    return float(np.mean(hits))


# -- checkpoints --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "cmgnav-checkpoint"
CHECKPOINT_VERSION = 1


def _params_json(params: dict) -> dict:
    return {k: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
            for k, p in params.items()}


def _arrays_json(arrs: dict) -> dict:
    return {k: {"shape": list(a.shape), "values": a.reshape(-1).tolist()} for k, a in arrs.items()}


def _from_json(entry: dict) -> np.ndarray:
    return np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])


def checkpoint_dict(trainer: Trainer) -> dict:
    def opt(o: Adam) -> dict:
        d = o.state_dict()
        d["first_moment"] = _arrays_json(d["first_moment"])
        d["second_moment"] = _arrays_json(d["second_moment"])
        return d
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": trainer.iteration,
        "train_config": asdict(trainer.config),
        "navigator_config": trainer.nav.config_dict(),
        "discriminator_config": trainer.disc.config_dict(),
        "navigator": _params_json(trainer.nav.params),
        "discriminator": _params_json(trainer.disc.params),
        "optimizers": {"generator": opt(trainer.gen_opt), "discriminator": opt(trainer.dis_opt)},
        "rng": {name: rng_state(r) for name, r in trainer.rngs.items()},
        "seed": trainer.config.seed,
        "batch_order": [int(i) for i in trainer._order],
    }


def save_checkpoint(path, trainer: Trainer) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(trainer), sort_keys=True))
    return path


def read_checkpoint(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {d.get('version')}")
    return d


def load_params(params: dict, saved: dict) -> None:
    if set(params) != set(saved):
        raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(saved))}")
    for k, p in params.items():
        arr = _from_json(saved[k])
        if arr.shape != p.data.shape:
            raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} vs model {p.data.shape}")
        p.data = arr


def navigator_from_checkpoint(d: dict) -> Navigator:
    nav = Navigator(NavigatorConfig(**d["navigator_config"]), np.random.default_rng(0))
    load_params(nav.params, d["navigator"])
    return nav


def restore_trainer(d: dict, dataset: Dataset, graphs: dict[str, NavGraph]) -> Trainer:
    cfg = dict(d["train_config"])
    trainer = Trainer(TrainConfig(**cfg), dataset, graphs)
    load_params(trainer.nav.params, d["navigator"])
    load_params(trainer.disc.params, d["discriminator"])
    for opt, key in ((trainer.gen_opt, "generator"), (trainer.dis_opt, "discriminator")):
        s = dict(d["optimizers"][key])
        s["first_moment"] = {k: _from_json(v) for k, v in s["first_moment"].items()}
        s["second_moment"] = {k: _from_json(v) for k, v in s["second_moment"].items()}
        opt.load_state_dict(s)
    trainer.rngs = {k: restore_rng(v) for k, v in d["rng"].items()}
    trainer.iteration = int(d["iteration"])
    trainer._order = list(d.get("batch_order", []))
    return trainer
