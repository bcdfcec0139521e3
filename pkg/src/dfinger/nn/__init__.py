from .checkpoint import Checkpoint, load_checkpoint, param_hash, save_checkpoint
from .layers import init_attention, multihead_attention
from .optim import Adam, adam_step, clip_grad_norm
from .params import ParamStore
from .tensor import (
    Tape,
    Tensor,
    causal_conv1d,
    concat,
    gru_sequence,
    gru_step,
    linear,
    matmul,
    relu,
    sigmoid,
    softmax,
    tanh,
)

__all__ = [
    "Adam", "Checkpoint", "ParamStore", "Tape", "Tensor", "adam_step", "causal_conv1d",
    "clip_grad_norm", "concat", "gru_sequence", "gru_step", "init_attention", "linear",
    "load_checkpoint", "matmul", "multihead_attention", "param_hash", "relu",
    "save_checkpoint", "sigmoid", "softmax", "tanh",
]
