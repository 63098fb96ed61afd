"""Minimal dense tensors with reverse-mode autodiff, layers, CTC and Adam."""

from .core import (
    Tensor,
    as_tensor,
    concat,
    exp,
    glu,
    log,
    log_softmax,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    stack,
    swish,
    tanh,
)
from .functional import (
    batch_norm,
    conv2d,
    ctc_feasible,
    ctc_loss,
    ctc_loss_batch,
    depthwise_conv1d,
    dropout,
    gather_last,
    gru,
    layer_norm,
    linear,
    lstm,
    reverse_padded,
    softmax_cross_entropy,
)
from .gradcheck import finite_diff_check
from .layers import (
    GRU,
    LSTM,
    BatchNorm2d,
    BiGRU,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    ResidualBlock,
    gru_layer,
    lstm_layer,
    residual_block,
)
from .optim import Adam, OptimizerState, adam_step, clip_grad_norm
