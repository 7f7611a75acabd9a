"""Teacher-forced vs student-forced behaviour classifier and its losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import dropout_mask, encode_sequence, init_lstm, lstm_weights, uniform_init
from .autodiff.tensor import Tensor

EPS = 1e-7


@dataclass
class DiscriminatorConfig:
    input_dim: int = 64
    summary_hidden: int = 32   # per direction
    mlp_hidden: int = 64
    slope: float = 0.2
    dropout: float = 0.3


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator):
        self.config = c = config
        p: dict[str, Tensor] = {}
        init_lstm(p, "sum_f", c.input_dim, c.summary_hidden, rng)
        init_lstm(p, "sum_b", c.input_dim, c.summary_hidden, rng)
        widths = [2 * c.summary_hidden, c.mlp_hidden, c.mlp_hidden, 1]
        for i, (a, b) in enumerate(zip(widths, widths[1:]), start=1):
            p[f"fc{i}.W"] = uniform_init(rng, (a, b), a, f"fc{i}.W")
            p[f"fc{i}.b"] = uniform_init(rng, (b,), a, f"fc{i}.b")
        self.params = p

    def discriminate(self, behavior: Sequence[Tensor], step_mask=None, train: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Probability (B,) that each behavioural sequence is the positive class.

        ``behavior[t]`` is (B, input_dim); ``step_mask[t, b]`` marks real steps so
        every row is summarised over its own true length.
        """
        if len(behavior) == 0:
            raise ValueError("discriminate: empty behavioural sequence")
        c = self.config
        if behavior[0].shape[-1] != c.input_dim:
            raise ValueError(f"discriminate: expected width {c.input_dim}, got {behavior[0].shape[-1]}")
        mask = None if step_mask is None else np.asarray(step_mask, dtype=bool).T
        xs = ops.stack(list(behavior), axis=1)
        fwd = encode_sequence(xs, lstm_weights(self.params, "sum_f"), mask)
        bwd = encode_sequence(xs, lstm_weights(self.params, "sum_b"), mask, reverse=True)
        # masked steps hold state, so the last forward state is each row's final one
        T = xs.shape[1]
        x = ops.concat([ops.select(fwd, T - 1, 1), ops.select(bwd, 0, 1)], axis=-1)
        for i in (1, 2):
            x = ops.leaky_relu(ops.linear(x, self.params[f"fc{i}.W"], self.params[f"fc{i}.b"]), c.slope)
            if train and c.dropout > 0:
                x = ops.mul(x, Tensor(dropout_mask(x.shape, c.dropout, rng)))
        logit = ops.linear(x, self.params["fc3.W"], self.params["fc3.b"])
        # the clamp keeps saturated outputs strictly inside (0, 1)
        return ops.reshape(_clamped(ops.sigmoid(logit)), logit.shape[:-1])

    def config_dict(self) -> dict:
        return asdict(self.config)


def _clamped(p: Tensor) -> Tensor:
    return ops.clip(p, EPS, 1.0 - EPS)


def neg_log(p: Tensor) -> Tensor:
    """Batch mean of -log p with p clamped away from 0 and 1."""
    return ops.neg(ops.mean(ops.log(_clamped(p))))


def neg_log1m(p: Tensor) -> Tensor:
    """Batch mean of -log(1 - p) with p clamped away from 0 and 1."""
    return ops.neg(ops.mean(ops.log(ops.add(ops.neg(_clamped(p)), 1.0))))


def discriminator_loss(p_tf: Tensor, p_sf: Tensor, stage: int) -> Tensor:
    """BCE over one teacher batch and one student batch.

    Stage 1 labels teacher-forced behaviour positive, stage 2 labels
    student-forced behaviour positive.  Each term is averaged over its batch.
    """
    if stage == 1:
        return ops.add(neg_log(p_tf), neg_log1m(p_sf))
    if stage == 2:
        return ops.add(neg_log(p_sf), neg_log1m(p_tf))
    raise ValueError("stage must be 1 or 2")


def generator_fooling_loss(p: Tensor, stage: int) -> Tensor:
    """Stage 1: -log D(student behaviour); stage 2: -log(1 - D(teacher behaviour))."""
    if stage == 1:
        return neg_log(p)
    if stage == 2:
        return neg_log1m(p)
    raise ValueError("stage must be 1 or 2")


def accuracy(p_tf: np.ndarray, p_sf: np.ndarray) -> float:
    """Fraction correct with teacher-forced behaviour as the positive class."""
    p_tf, p_sf = np.asarray(p_tf), np.asarray(p_sf)
    return float(((p_tf > 0.5).sum() + (p_sf <= 0.5).sum()) / (p_tf.size + p_sf.size))
