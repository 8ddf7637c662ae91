"""Numerics core: taped tensors, reverse-mode gradients, seeded sampling."""

from .autodiff import (
    GradTape,
    Tensor,
    add,
    add_bias,
    concat_cols,
    grad,
    hadamard,
    layer_norm,
    matmul,
    max_axis,
    mean_axis,
    normalize_sum_axis,
    record_op,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_axis,
    sub,
    sum_all,
    tanh,
    track_macs,
    transpose,
)
from .rng import RngStream, sample_beta, sample_subset

__all__ = [
    "GradTape",
    "Tensor",
    "RngStream",
    "add",
    "add_bias",
    "concat_cols",
    "grad",
    "hadamard",
    "layer_norm",
    "matmul",
    "max_axis",
    "mean_axis",
    "normalize_sum_axis",
    "record_op",
    "relu",
    "reshape",
    "sample_beta",
    "sample_subset",
    "scale",
    "sigmoid",
    "softmax_axis",
    "sub",
    "sum_all",
    "tanh",
    "track_macs",
    "transpose",
]
