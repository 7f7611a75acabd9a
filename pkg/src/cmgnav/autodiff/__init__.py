from . import tensor as ops
from .gradcheck import finite_difference_check, relative_error
from .nn import (LSTMWeights, bidirectional_encode, bidirectional_sequence, encode_sequence, dropout_mask, init_lstm, lstm_step,
                 lstm_weights, run_lstm, uniform_init)
from .optim import Adam, AdamState
from .tensor import Tensor, backward, frozen, no_grad

__all__ = [
    "Adam", "AdamState", "LSTMWeights", "Tensor", "backward", "bidirectional_encode",
    "bidirectional_sequence", "encode_sequence",
    "dropout_mask", "finite_difference_check", "frozen", "init_lstm", "lstm_step",
    "lstm_weights", "no_grad", "ops", "relative_error", "run_lstm", "uniform_init",
]
