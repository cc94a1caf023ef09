"""Numpy implementations of the fused hot kernels.

This is the fallback backend: every function here has a signature-identical
twin in the compiled ``_ckernels`` extension. Matrix products are not in this
set on purpose; numpy already routes those through BLAS and a hand loop
could only lose.

All 2D kernels normalize/act along the last axis and expect C-contiguous
float32 or float64 input.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def softmax_forward(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_backward(y, gy):
    inner = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - inner)


def layer_norm_forward(x, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layer_norm_backward(xhat, rstd, gain, gy):
    # d/dx of xhat*gain+bias, with mean/var both functions of x.
    ghat = gy * gain
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    gx = rstd * (ghat - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx.astype(gy.dtype, copy=False), ggain, gbias


def gelu_forward(x):
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (gy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def rotate_plane(vol, axis, angle_rad):
    """Rotate a 3D grid within the plane orthogonal to ``axis``.

    Inverse-maps each output voxel to source coordinates about the grid
    center and samples bilinearly in-plane (voxels along the rotation axis
    do not mix, so this equals trilinear sampling on the full grid).
    Out-of-grid samples are zero.
    """
    vol = np.asarray(vol)
    moved = np.moveaxis(vol, axis, 0)  # (K, A, B): rotation mixes A and B only
    na, nb = moved.shape[1], moved.shape[2]
    ca, cb = (na - 1) / 2.0, (nb - 1) / 2.0
    cos_t, sin_t = np.cos(angle_rad), np.sin(angle_rad)

    ia, ib = np.meshgrid(np.arange(na), np.arange(nb), indexing="ij")
    da, db = ia - ca, ib - cb
    # inverse rotation of the output coordinate into the source frame
    sa = cos_t * da + sin_t * db + ca
    sb = -sin_t * da + cos_t * db + cb

    a0 = np.floor(sa).astype(np.intp)
    b0 = np.floor(sb).astype(np.intp)
    fa, fb = sa - a0, sb - b0

    out = np.zeros_like(moved)
    for doa, dob in ((0, 0), (0, 1), (1, 0), (1, 1)):
        aa, bb = a0 + doa, b0 + dob
        ok = (aa >= 0) & (aa < na) & (bb >= 0) & (bb < nb)
        w = np.where(doa, fa, 1.0 - fa) * np.where(dob, fb, 1.0 - fb)
        w = (w * ok).astype(vol.dtype)
        vals = moved[:, np.clip(aa, 0, na - 1), np.clip(bb, 0, nb - 1)]
        out += vals * w[None, :, :]
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))
