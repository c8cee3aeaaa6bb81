"""Reverse-mode autodiff over dense float64 tensors."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conv import conv3d, conv_transpose3d, maxpool3d, upsample_nearest
from .module import Module
from .optim import kaiming_uniform, parameter, sgd_step, zero_grad
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    activation,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    dense,
    div,
    dropout,
    exp,
    flatten,
    getitem,
    instance_norm,
    global_avg_pool,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    take,
    transpose,
    tsum,
)
