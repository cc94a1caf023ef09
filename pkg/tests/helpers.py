"""Shared test utilities: finite-difference oracles and tiny model builders."""

import numpy as np

from trivit.fusion import FusionConfig
from trivit.model import ModelConfig
from trivit.numerics import Tape, Tensor
from trivit.vit import ViTConfig


def finite_difference(fn, tensor, h_scale=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``tensor``.

    Step is h_scale scaled by entry magnitude. The tensor is restored after.
    """
    base = tensor.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = h_scale * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def check_gradients(build_loss, params, tol=1e-4, h_scale=1e-5):
    """Assert analytic vs central-difference gradients for every parameter.

    ``build_loss()`` must construct the loss inside the active tape and
    return the loss tensor (all tensors float64).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
        grads = tape.backward(loss, params=params)

    def value():
        return build_loss().item()

    worst = 0.0
    for p in params:
        fd = finite_difference(value, p, h_scale=h_scale)
        err = relative_error(grads[p], fd)
        worst = max(worst, float(err.max()))
        assert err.max() < tol, (
            f"gradient mismatch: rel err {err.max():.3e} (shape {p.shape})"
        )
    return worst


def sampled_gradient_check(build_loss, named_params, entries_per_tensor, tol,
                           rng, h_scale=1e-5):
    """FD check on a random subset of entries of every parameter tensor."""
    params = [p for _, p in named_params]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
        grads = tape.backward(loss, params=params)

    def value():
        return build_loss().item()

    worst = 0.0
    for name, p in named_params:
        flat = p.data.reshape(-1)
        take = min(entries_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=take, replace=False)
        for i in idxs:
            orig = flat[i]
            h = h_scale * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            f_plus = value()
            flat[i] = orig - h
            f_minus = value()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = float(relative_error(grads[p].reshape(-1)[i], fd))
            worst = max(worst, err)
            assert err < tol, f"{name}[{i}]: rel err {err:.3e}"
    return worst


def param(rng, shape, dtype=np.float64, scale=0.5):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, dtype=dtype)


def tiny_model_config(dims=(4, 4, 4), patch=2, strategy="mlp"):
    """Smallest config exercising multi-patch, multi-head, multi-layer paths."""
    return ModelConfig(
        volume_dims=dims,
        vit=ViTConfig(
            patch_size=patch, embed_dim=8, num_heads=2, num_layers=2,
            dropout=0.0, mlp_hidden=8, head_hidden=8,
        ),
        fusion=FusionConfig(strategy=strategy, widths=[3, 4, 3]),
        normalize_input=False,
    )


def desk_model_config(strategy="mlp"):
    return ModelConfig(
        volume_dims=(28, 28, 28),
        vit=ViTConfig(
            patch_size=7, embed_dim=64, num_heads=4, num_layers=2,
            dropout=0.1, mlp_hidden=128,
        ),
        fusion=FusionConfig(strategy=strategy, widths=[3, 16, 32, 16, 3]),
    )
