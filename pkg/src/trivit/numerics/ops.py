"""Primitive tensor operations with recorded backward rules.

Exactly the op set the model needs; no general broadcasting. Forward math
for the fused kernels (softmax, layer norm, GELU) is delegated to the
active kernel backend; everything else is plain numpy. Backward closures
work on raw ndarrays only, so replaying a tape never re-records.
"""

from __future__ import annotations

import numpy as np

from trivit.errors import ContractError, ShapeMismatchError
from trivit.numerics import kernels
from trivit.numerics.tensor import Tensor, active_tape


def _record(out, inputs, backward_fn):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _need(t):
    return t.requires_grad


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)

    def bwd(gy):
        return (gy if _need(a) else None, gy if _need(b) else None)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data - b.data)

    def bwd(gy):
        return (gy if _need(a) else None, -gy if _need(b) else None)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(gy):
        return (gy * bd if _need(a) else None, gy * ad if _need(b) else None)

    return _record(out, (a, b), bwd)


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    out = Tensor(x.data * np.asarray(alpha, dtype=x.dtype))

    def bwd(gy):
        return (gy * np.asarray(alpha, dtype=gy.dtype),)

    return _record(out, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {tuple(a.shape)} x {tuple(b.shape)}"
        )
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(gy):
        ga = gy @ bd.T if _need(a) else None
        gb = ad.T @ gy if _need(b) else None
        return (ga, gb)

    return _record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(
            f"linear: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}"
        )
    if b.data.shape != (w.shape[1],):
        raise ShapeMismatchError(
            f"linear: bias {tuple(b.shape)} does not match weight {tuple(w.shape)}"
        )
    out = Tensor(x.data @ w.data + b.data)
    xd, wd = x.data, w.data

    def bwd(gy):
        gx = gy @ wd.T if _need(x) else None
        gw = xd.T @ gy if _need(w) else None
        gb = gy.sum(axis=0) if _need(b) else None
        return (gx, gw, gb)

    return _record(out, (x, w, b), bwd)


def _rows_view(arr, axis):
    """Move ``axis`` last and flatten to 2D; returns (rows2d, restore_fn)."""
    moved = np.moveaxis(arr, axis, -1)
    shape = moved.shape
    rows = np.ascontiguousarray(moved.reshape(-1, shape[-1]))

    def restore(rows2d):
        return np.moveaxis(rows2d.reshape(shape), -1, axis)

    return rows, restore


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= axis < x.data.ndim:
        raise ShapeMismatchError(f"softmax: axis {axis} invalid for shape {x.shape}")
    rows, restore = _rows_view(x.data, axis)
    y_rows = kernels.softmax_forward(rows)
    out = Tensor(np.ascontiguousarray(restore(y_rows)))

    def bwd(gy):
        g_rows, _ = _rows_view(gy, axis)
        gx_rows = kernels.softmax_backward(y_rows, g_rows)
        return (np.ascontiguousarray(restore(gx_rows)),)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (eps inside the square root), then affine."""
    d = x.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gain {tuple(gain.shape)} / bias {tuple(bias.shape)} "
            f"do not match last axis of {tuple(x.shape)}"
        )
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    xhat, rstd = kernels.layer_norm_forward(rows, float(eps))
    out = Tensor((xhat * gain.data + bias.data).reshape(x.shape))
    gd = gain.data

    def bwd(gy):
        gy_rows = np.ascontiguousarray(gy.reshape(-1, d))
        gx, ggain, gbias = kernels.layer_norm_backward(xhat, rstd, gd, gy_rows)
        return (
            gx.reshape(gy.shape) if _need(x) else None,
            ggain if _need(gain) else None,
            gbias if _need(bias) else None,
        )

    return _record(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    rows = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1] if x.data.ndim else 1))
    out = Tensor(kernels.gelu_forward(rows).reshape(x.shape))
    xd = rows

    def bwd(gy):
        g = kernels.gelu_backward(xd, np.ascontiguousarray(gy.reshape(xd.shape)))
        return (g.reshape(gy.shape),)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def bwd(gy):
        return (gy * mask,)

    return _record(out, (x,), bwd)


def dropout(x: Tensor, p: float, rng, train: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability {p} outside [0, 1)")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p)
    factor = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * factor
    out = Tensor(x.data * mask)

    def bwd(gy):
        return (gy * mask,)

    return _record(out, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    needs = [_need(t) for t in tensors]

    def bwd(gy):
        pieces = np.split(gy, bounds, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _record(out, tuple(tensors), bwd)


def _narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(x.data[idx]))
    shape = x.shape

    def bwd(gy):
        gx = np.zeros(shape, dtype=gy.dtype)
        gx[idx] = gy
        return (gx,)

    return _record(out, (x,), bwd)


def split(x: Tensor, sections, axis: int = 0):
    """Partition along ``axis``; inverse of concat. ``sections`` is a count
    (equal parts) or a list of sizes that must sum to the extent."""
    extent = x.shape[axis]
    if isinstance(sections, int):
        if extent % sections != 0:
            raise ShapeMismatchError(
                f"split: extent {extent} not divisible into {sections} parts"
            )
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise ShapeMismatchError(
                f"split: sizes {sizes} do not sum to extent {extent}"
            )
    pieces = []
    start = 0
    for s in sizes:
        pieces.append(_narrow(x, axis, start, s))
        start += s
    return pieces


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeMismatchError(f"permute: axes {axes} invalid for shape {x.shape}")
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    inverse = tuple(np.argsort(axes))

    def bwd(gy):
        return (np.ascontiguousarray(np.transpose(gy, inverse)),)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    old = x.shape

    def bwd(gy):
        return (gy.reshape(old),)

    return _record(out, (x,), bwd)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(np.asarray(x.data.mean(dtype=x.dtype)))
        n = x.data.size
        shape = x.shape

        def bwd(gy):
            return (np.full(shape, gy / n, dtype=gy.dtype),)

        return _record(out, (x,), bwd)

    out = Tensor(x.data.mean(axis=axis, dtype=x.dtype))
    n = x.shape[axis]

    def bwd_axis(gy):
        return (np.repeat(np.expand_dims(gy / n, axis), n, axis=axis),)

    return _record(out, (x,), bwd_axis)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(np.asarray(x.data.sum(dtype=x.dtype)))
        shape = x.shape

        def bwd(gy):
            return (np.full(shape, gy, dtype=gy.dtype),)

        return _record(out, (x,), bwd)

    out = Tensor(x.data.sum(axis=axis, dtype=x.dtype))
    n = x.shape[axis]

    def bwd_axis(gy):
        return (np.repeat(np.expand_dims(gy, axis), n, axis=axis),)

    return _record(out, (x,), bwd_axis)
