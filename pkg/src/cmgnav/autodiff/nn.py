"""Recurrent building blocks, initialisation and dropout on top of the tape."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .tensor import (DTYPE, Tensor, concat, lstm_sequence, lstm_cell_output, lstm_cell_update,
                     lstm_preact)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class LSTMWeights(NamedTuple):
    wx: Tensor  # (in, 4H)
    wh: Tensor  # (H, 4H)
    b: Tensor   # (4H,)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


def init_lstm(params: dict, prefix: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    """Register ``{prefix}.wx``, ``{prefix}.wh``, ``{prefix}.b`` in ``params``."""
    params[f"{prefix}.wx"] = uniform_init(rng, (n_in, 4 * n_hidden), n_hidden, f"{prefix}.wx")
    params[f"{prefix}.wh"] = uniform_init(rng, (n_hidden, 4 * n_hidden), n_hidden, f"{prefix}.wh")
    params[f"{prefix}.b"] = uniform_init(rng, (4 * n_hidden,), n_hidden, f"{prefix}.b")


def lstm_weights(params: dict, prefix: str) -> LSTMWeights:
    return LSTMWeights(params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"])


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: LSTMWeights, mask=None) -> tuple[Tensor, Tensor]:
    """One gated recurrent step. Rows with ``mask`` false keep their state."""
    z = lstm_preact(x, h_prev, w.wx, w.wh, w.b)
    c = lstm_cell_update(z, c_prev, mask)
    h = lstm_cell_output(z, c, h_prev, mask)
    return h, c


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def run_lstm(xs: Sequence[Tensor], w: LSTMWeights, masks=None, reverse: bool = False) -> list[Tensor]:
    """Run a cell over ``xs``; returns the hidden state aligned with each input.

    ``masks[t]`` marks the rows whose sequence covers position ``t``.  With
    right-padded batches the reverse pass therefore starts at each row's own
    last valid position.
    """
    lead = xs[0].shape[:-1]
    h = zeros(*lead, w.hidden)
    c = zeros(*lead, w.hidden)
    out: list[Tensor | None] = [None] * len(xs)
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in order:
        h, c = lstm_step(xs[t], h, c, w, None if masks is None else masks[t])
        out[t] = h
    return out


def bidirectional_encode(xs: Sequence[Tensor], fwd: LSTMWeights, bwd: LSTMWeights, masks=None) -> list[Tensor]:
    """Concatenate forward and backward states at every position."""
    if len(xs) == 0:
        raise ValueError("bidirectional_encode: empty sequence")
    f = run_lstm(xs, fwd, masks)
    b = run_lstm(xs, bwd, masks, reverse=True)
    return [concat([hf, hb], axis=-1) for hf, hb in zip(f, b)]


def dropout_mask(shape, ratio: float, rng: np.random.Generator | None, train: bool = True) -> np.ndarray:
    """Inverted-dropout keep mask: 0 with probability ``ratio``, else 1/(1-ratio)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not train or ratio == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= ratio
    return keep / (1.0 - ratio)


def encode_sequence(xs: Tensor, w: LSTMWeights, mask=None, reverse: bool = False) -> Tensor:
    """Fused equivalent of ``stack(run_lstm(...), axis=1)`` for a (B, T, in) input."""
    return lstm_sequence(xs, w.wx, w.wh, w.b, mask, reverse)


def bidirectional_sequence(xs: Tensor, fwd: LSTMWeights, bwd: LSTMWeights, mask=None) -> Tensor:
    """Fused equivalent of ``stack(bidirectional_encode(...), axis=1)``: (B, T, 2H)."""
    if xs.shape[1] == 0:
        raise ValueError("cannot encode an empty sequence")
    return concat([encode_sequence(xs, fwd, mask), encode_sequence(xs, bwd, mask, reverse=True)],
                      axis=-1)
