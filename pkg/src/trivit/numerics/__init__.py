"""Minimal dense-tensor library with reverse-mode autodiff.

Covers exactly the operations the tri-view model needs. Heavy elementwise
kernels dispatch through ``trivit.numerics.kernels`` (compiled extension
when built, numpy otherwise); matrix products go straight to BLAS.
"""

from trivit.numerics import kernels, ops
from trivit.numerics.ops import (
    add,
    concat,
    dropout,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    permute,
    relu,
    reshape,
    scale,
    softmax,
    split,
    sub,
    tsum,
)
from trivit.numerics.tensor import DEFAULT_DTYPE, Tape, Tensor, active_tape, backward

__all__ = [
    "DEFAULT_DTYPE",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "concat",
    "dropout",
    "gelu",
    "kernels",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "ops",
    "permute",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "split",
    "sub",
    "tsum",
]
