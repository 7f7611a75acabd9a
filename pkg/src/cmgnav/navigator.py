"""Cross-modal grounding navigator.

At every step the agent grounds the instruction and the current panorama twice:
historically (queries from the previous decoder state) and mutually (each
modality queried by a summary of the other).  The four grounded vectors and the
previous-action embedding drive an LSTM decoder whose state scores every
navigable direction.

Matrices are stored input-major, so a product written ``W h`` elsewhere is
``h @ W`` here.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import (bidirectional_sequence, dropout_mask, init_lstm, lstm_step, lstm_weights,
                          uniform_init)
from .autodiff.tensor import Tensor
from .env import STOP, EpisodeState, NavGraph, default_t_max, oracle_action, start_episode, step
from .episodes import PAD, Episode

MODES = ("teacher", "student", "greedy")
GROUNDINGS = ("cmg", "historical", "mutual")


@dataclass
class NavigatorConfig:
    vocab_size: int
    feature_dim: int = 32
    k_max: int = 5
    word_dim: int = 32
    enc_hidden: int = 32      # per direction; encodings are 2 * enc_hidden wide
    model_dim: int = 64       # projected feature width, must equal 2 * enc_hidden
    dec_hidden: int = 64
    action_dim: int = 16
    grounding: str = "cmg"

    def __post_init__(self):
        if self.model_dim != 2 * self.enc_hidden:
            raise ValueError("model_dim must equal 2 * enc_hidden (mutual grounding multiplies "
                             "feature and instruction summaries elementwise)")
        if self.grounding not in GROUNDINGS:
            raise ValueError(f"grounding must be one of {GROUNDINGS}")

    @property
    def uses_historical(self) -> bool:
        return self.grounding in ("cmg", "historical")

    @property
    def uses_mutual(self) -> bool:
        return self.grounding in ("cmg", "mutual")


@dataclass
class StepTrace:
    t: int
    node: int
    action: int
    supervision: int
    p: np.ndarray
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    alpha_m: np.ndarray | None = None
    beta_m: np.ndarray | None = None


@dataclass
class TrajectoryRecord:
    episode: Episode
    mode: str
    nodes: list[int]
    actions: list[int]
    supervision: list[int]
    nll: float
    hidden: list[np.ndarray] = field(default_factory=list)
    steps: list[StepTrace] = field(default_factory=list)

    def dump_rows(self) -> list[dict]:
        def arr(a):
            return None if a is None else [float(v) for v in a]
        return [{
            "episode_id": self.episode.episode_id, "graph_id": self.episode.graph_id,
            "mode": self.mode, "t": s.t, "node": int(s.node), "action": int(s.action),
            "supervision": int(s.supervision), "alpha": arr(s.alpha), "beta": arr(s.beta),
            "alpha_m": arr(s.alpha_m), "beta_m": arr(s.beta_m), "p": arr(s.p),
        } for s in self.steps]


DUMP_FIELDS = {"episode_id": str, "graph_id": str, "mode": str, "t": int, "node": int,
               "action": int, "supervision": int, "alpha": list, "beta": list,
               "alpha_m": list, "beta_m": list, "p": list}
OPTIONAL_DUMP_FIELDS = ("alpha", "beta", "alpha_m", "beta_m")


def validate_dump_row(row: dict) -> None:
    """Raise ValueError unless ``row`` is a well-formed trajectory/attention dump row."""
    if set(row) != set(DUMP_FIELDS):
        raise ValueError(f"dump row keys differ: {sorted(set(row) ^ set(DUMP_FIELDS))}")
    for k, typ in DUMP_FIELDS.items():
        v = row[k]
        if v is None and k in OPTIONAL_DUMP_FIELDS:
            continue
        if not isinstance(v, typ) or (typ is int and isinstance(v, bool)):
            raise ValueError(f"dump field {k!r} has type {type(v).__name__}")
    if row["t"] < 0 or row["node"] < 0 or row["action"] < 0:
        raise ValueError("negative step, node or action")
    p = np.asarray(row["p"], dtype=float)
    if p.ndim != 1 or not 0 <= row["action"] < p.size or abs(p.sum() - 1.0) > 1e-6 or (p < 0).any():
        raise ValueError("p must be a distribution covering the chosen action")
    for k in OPTIONAL_DUMP_FIELDS:
        if row[k] is not None:
            w = np.asarray(row[k], dtype=float)
            if abs(w.sum() - 1.0) > 1e-6 or (w < 0).any():
                raise ValueError(f"{k} is not an attention distribution")


@dataclass
class Rollout:
    """Batched rollout output; tensors keep their tape for later losses."""
    records: list[TrajectoryRecord]
    hidden: list[Tensor]          # per step, (B, H)
    outputs: list[Tensor]         # per step, (B, K+1) action distributions
    step_mask: np.ndarray         # (T, B) true where the episode was still running
    nll: Tensor                   # batch mean of per-episode summed NLL
    nll_per_episode: np.ndarray


class Navigator:
    def __init__(self, config: NavigatorConfig, rng: np.random.Generator):
        self.config = config
        c = config
        P, H, A = c.model_dim, c.dec_hidden, c.action_dim
        p: dict[str, Tensor] = {}
        emb = uniform_init(rng, (c.vocab_size, c.word_dim), c.word_dim, "embedding")
        emb.data[PAD] = 0.0
        p["embedding"] = emb
        init_lstm(p, "enc_f", c.word_dim, c.enc_hidden, rng)
        init_lstm(p, "enc_b", c.word_dim, c.enc_hidden, rng)
        p["W_p"] = uniform_init(rng, (c.feature_dim, P), c.feature_dim, "W_p")
        if c.uses_historical:
            p["W_hv"] = uniform_init(rng, (H, P), H, "W_hv")
            p["W_hx"] = uniform_init(rng, (H, P), H, "W_hx")
        if c.uses_mutual:
            for name in ("Wt_x", "Wt_v", "W_b", "W_qx", "W_qv"):
                p[name] = uniform_init(rng, (P, P), P, name)
        n_grounded = 4 if c.grounding == "cmg" else 2
        init_lstm(p, "dec", n_grounded * P + A, H, rng)
        p["W_a"] = uniform_init(rng, (H + P, P), H + P, "W_a")
        p["action_embedding"] = uniform_init(rng, (c.k_max + 2, A), A, "action_embedding")
        self.params = p

    @property
    def start_action(self) -> int:
        return self.config.k_max + 1

    # -- components ------------------------------------------------------------------------

    def encode_instruction(self, tokens) -> tuple[Tensor, np.ndarray]:
        """Bidirectional encodings (B, L, P) and the non-PAD mask (B, L)."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        if tokens.shape[1] == 0:
            raise ValueError("empty instruction")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise IndexError("token id out of vocabulary range")
        mask = tokens != PAD
        xs = ops.embedding(self.params["embedding"], tokens, frozen_row=PAD)
        enc = bidirectional_sequence(xs, lstm_weights(self.params, "enc_f"),
                                     lstm_weights(self.params, "enc_b"), mask)
        return enc, mask

    def encode_episodes(self, episodes: Sequence[Episode]) -> tuple:
        """Right-padded batch encoding plus the step-invariant mutual summary."""
        L = max(len(e.instruction) for e in episodes)
        tokens = np.full((len(episodes), L), PAD, dtype=np.int64)
        for b, e in enumerate(episodes):
            tokens[b, :len(e.instruction)] = e.instruction
        X, xmask = self.encode_instruction(tokens)
        summary = self.instruction_summary(X, xmask) if self.config.uses_mutual else None
        return X, xmask, summary

    def project(self, raw: np.ndarray, keep: np.ndarray | None = None) -> Tensor:
        v = ops.relu(ops.matmul(Tensor(raw), self.params["W_p"]))
        if keep is not None:
            v = ops.mul(v, Tensor(keep))
        return v

    def historical_ground(self, X: Tensor, xmask, V: Tensor, vmask, h_prev: Tensor):
        """Attend over directions and words with the previous decoder state as query."""
        p = self.params
        alpha = ops.masked_softmax(ops.attend_scores(V, ops.matmul(h_prev, p["W_hv"])), vmask)
        beta = ops.masked_softmax(ops.attend_scores(X, ops.matmul(h_prev, p["W_hx"])), xmask)
        return ops.weighted_sum(beta, X), ops.weighted_sum(alpha, V), alpha, beta

    def instruction_summary(self, X: Tensor, xmask) -> tuple[Tensor, Tensor]:
        """tanh of the masked word mean and its textual query factor (step-invariant)."""
        x_hat = ops.tanh(ops.masked_mean(X, xmask))
        return x_hat, ops.tanh(ops.matmul(x_hat, self.params["Wt_x"]))

    def mutual_ground(self, X: Tensor, xmask, V: Tensor, vmask, summary=None):
        p = self.params
        x_hat, tx = summary if summary is not None else self.instruction_summary(X, xmask)
        v_hat = ops.tanh(ops.masked_mean(V, vmask))
        base = ops.mul(v_hat, x_hat)
        gate = ops.tanh(ops.matmul(base, p["W_b"]))
        q_x = ops.mul(tx, gate)
        q_v = ops.mul(ops.tanh(ops.matmul(v_hat, p["Wt_v"])), gate)
        alpha = ops.masked_softmax(ops.attend_scores(V, ops.matmul(q_v, p["W_qv"])), vmask)
        beta = ops.masked_softmax(ops.attend_scores(X, ops.matmul(q_x, p["W_qx"])), xmask)
        return ops.weighted_sum(beta, X), ops.weighted_sum(alpha, V), alpha, beta

    def decode_step(self, grounded: Sequence[Tensor], a_prev: Tensor, h_prev: Tensor,
                    c_prev: Tensor, mask=None) -> tuple[Tensor, Tensor]:
        """LSTM over the concatenation (grounded..., previous action embedding)."""
        x = ops.concat(list(grounded) + [a_prev], axis=-1)
        return lstm_step(x, h_prev, c_prev, lstm_weights(self.params, "dec"), mask)

    def action_logits(self, h: Tensor, x_ctx: Tensor, V: Tensor) -> Tensor:
        w = ops.matmul(ops.concat([h, x_ctx], axis=-1), self.params["W_a"])
        return ops.attend_scores(V, w)

    def action_distribution(self, h: Tensor, x_ctx: Tensor, V: Tensor, vmask) -> tuple[Tensor, Tensor]:
        o = self.action_logits(h, x_ctx, V)
        return ops.masked_softmax(o, vmask), o

    # -- rollout ----------------------------------------------------------------------------

    def rollout(self, episodes: Sequence[Episode], graphs: dict[str, NavGraph], mode: str,
                rng: np.random.Generator | None = None, dropout: float = 0.0,
                temperature: float = 1.0, record: bool = False,
                keep_outputs: bool = False,
                dropout_rng: np.random.Generator | None = None,
                encoded: tuple | None = None) -> Rollout:
        """Run a batch of episodes in lockstep until every one stops or hits its cap.

        teacher: execute the oracle action; student: sample from the predicted
        distribution (argmax when temperature is 0); greedy: argmax with no dropout.
        Supervision at every step is the oracle action from the current node.
        ``encoded`` reuses an ``encode_episodes`` result for the same batch.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        train = mode != "greedy"
        dropout_rng = dropout_rng or rng
        if mode == "student" and temperature != 0.0 and rng is None:
            raise ValueError("student rollouts need an rng for sampling")
        if train and dropout > 0 and dropout_rng is None:
            raise ValueError("dropout needs an rng")
        c = self.config
        B = len(episodes)
        K1 = c.k_max + 1
        gs = [graphs[e.graph_id] for e in episodes]
        for g in gs:
            if g.k_max > c.k_max or g.feature_dim != c.feature_dim:
                raise ValueError(f"graph {g.graph_id} incompatible with navigator widths")

        X, xmask, summary = encoded if encoded is not None else self.encode_episodes(episodes)
        if X.shape[0] != B:
            raise ValueError("encoding batch size differs from the episode batch")

        use_dropout = train and dropout > 0
        if use_dropout:
            feat_keep = dropout_mask((B, c.model_dim), dropout, dropout_rng)
            view_keep = [dropout_mask((g.n_nodes, K1), dropout, dropout_rng) for g in gs]

        states: list[EpisodeState] = [
            start_episode(g, e.start, default_t_max(e.hops)) for g, e in zip(gs, episodes)]
        h = Tensor(np.zeros((B, c.dec_hidden)))
        cell = Tensor(np.zeros((B, c.dec_hidden)))
        a_prev = np.full(B, self.start_action, dtype=np.int64)
        nodes = [[e.start] for e in episodes]
        actions = [[] for _ in episodes]
        sup = [[] for _ in episodes]
        traces = [[] for _ in episodes]
        hidden, outputs, masks = [], [], []
        nll_terms = []
        nll_np = np.zeros(B)

        t = 0
        while True:
            active = np.array([not s.done for s in states])
            if not active.any():
                break
            cur = [s.node for s in states]
            raw = np.empty((B, K1, c.feature_dim))
            vmask = np.empty((B, K1), dtype=bool)
            for b, (g, n) in enumerate(zip(gs, cur)):
                feats, fmask = g.padded_features()
                raw[b] = feats[n]
                vmask[b] = fmask[n]
            keep = None
            if use_dropout:
                keep = feat_keep[:, None, :] * np.stack([vk[n] for vk, n in zip(view_keep, cur)])[:, :, None]
            V = self.project(raw, keep)

            grounded = []
            att = {}
            if c.uses_historical:
                xh, vh, att["alpha"], att["beta"] = self.historical_ground(X, xmask, V, vmask, h)
                grounded += [xh, vh]
            if c.uses_mutual:
                xm, vm, att["alpha_m"], att["beta_m"] = self.mutual_ground(X, xmask, V, vmask, summary)
                grounded += [xm, vm]
            a_emb = ops.embedding(self.params["action_embedding"], a_prev)
            h, cell = self.decode_step(grounded, a_emb, h, cell, active)
            x_ctx = grounded[0]
            logits = self.action_logits(h, x_ctx, V)
            logp = ops.masked_log_softmax(logits, vmask)

            y = np.array([oracle_action(g, s.node, e.goal) if act else STOP
                          for g, s, e, act in zip(gs, states, episodes, active)])
            lp = ops.pick(logp, y)
            w = -active.astype(np.float64)
            nll_terms.append(ops.mul(lp, Tensor(w)))
            nll_np += w * lp.data
            hidden.append(h)
            masks.append(active)
            probs = np.where(vmask, np.exp(logp.data), 0.0)
            if keep_outputs:
                outputs.append(ops.masked_softmax(logits, vmask))

            if mode == "teacher":
                act_choice = y
            elif mode == "greedy" or temperature == 0.0:
                act_choice = np.argmax(np.where(vmask, logits.data, -np.inf), axis=1)
            else:
                q = probs if temperature == 1.0 else np.where(vmask, probs ** (1.0 / temperature), 0.0)
                q = q / q.sum(axis=1, keepdims=True)
                u = rng.random(B)
                act_choice = np.minimum((np.cumsum(q, axis=1) <= u[:, None]).sum(axis=1),
                                        vmask.sum(axis=1) - 1)

            for b in range(B):
                if not active[b]:
                    continue
                a = int(act_choice[b])
                if record:
                    k = int(vmask[b].sum())
                    vis = {n: att[n].data[b, :k] for n in ("alpha", "alpha_m") if n in att}
                    txt = {n: att[n].data[b][xmask[b]] for n in ("beta", "beta_m") if n in att}
                    traces[b].append(StepTrace(t, cur[b], a, int(y[b]), probs[b, :k], **vis, **txt))
                states[b] = step(states[b], a)
                actions[b].append(a)
                sup[b].append(int(y[b]))
                if a != STOP:
                    nodes[b].append(states[b].node)
            a_prev = np.where(active, act_choice, a_prev)
            t += 1

        total = nll_terms[0]
        for term in nll_terms[1:]:
            total = ops.add(total, term)
        nll = ops.mul(ops.sum(total), 1.0 / B)
        step_mask = np.array(masks)
        records = []
        for b, e in enumerate(episodes):
            records.append(TrajectoryRecord(
                e, mode, nodes[b], actions[b], sup[b], float(nll_np[b]),
                [hs.data[b] for hs, m in zip(hidden, step_mask[:, b]) if m], traces[b]))
        return Rollout(records, hidden, outputs, step_mask, nll, nll_np)

    # -- parameters ------------------------------------------------------------------------

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def config_dict(self) -> dict:
        return asdict(self.config)
