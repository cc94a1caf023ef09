"""Combining the three per-view outputs into one prediction.

The default is the pyramid MLP over the three scalar view predictions;
mean, best-validation-view, and concatenated-feature-map variants exist for
ablations. All fusions are differentiable tensor graphs so the view
encoders and the fusion train jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from trivit.errors import ConfigError, ContractError, ShapeMismatchError
from trivit.numerics import Tensor, add, concat, linear, relu, scale

STRATEGIES = ("mlp", "mean", "best", "feature_map")

# width sequence then a scalar readout; first width is the three view scalars
DEFAULT_WIDTHS = [3, 128, 256, 512, 1024, 512, 256, 128, 3]


@dataclass
class FusionConfig:
    strategy: str = "mlp"
    widths: list[int] = field(default_factory=lambda: list(DEFAULT_WIDTHS))

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"fusion strategy {self.strategy!r} not one of {STRATEGIES}"
            )
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"fusion widths {self.widths} invalid")
        if self.strategy == "mlp" and self.widths[0] != 3:
            raise ConfigError(
                f"mlp fusion takes the three view predictions; first width must "
                f"be 3, got {self.widths[0]}"
            )


@dataclass
class FusionParams:
    weights: list[Tensor]
    biases: list[Tensor]
    readout_w: Tensor
    readout_b: Tensor

    def named(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layers.{i}.w", w
            yield f"layers.{i}.b", b
        yield "readout_w", self.readout_w
        yield "readout_b", self.readout_b


def fusion_input_width(cfg: FusionConfig, embed_dim: int) -> int:
    if cfg.strategy == "feature_map":
        return 3 * embed_dim
    return cfg.widths[0]


def init_fusion_params(
    cfg: FusionConfig,
    embed_dim: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> FusionParams | None:
    if cfg.strategy in ("mean", "best"):
        return None
    widths = list(cfg.widths)
    widths[0] = fusion_input_width(cfg, embed_dim)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = (rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)).astype(dtype)
        weights.append(Tensor(w, requires_grad=True, dtype=dtype))
        biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))
    rw = (rng.standard_normal((widths[-1], 1)) * math.sqrt(2.0 / widths[-1])).astype(dtype)
    return FusionParams(
        weights=weights,
        biases=biases,
        readout_w=Tensor(rw, requires_grad=True, dtype=dtype),
        readout_b=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    )


def _pyramid(x: Tensor, params: FusionParams) -> Tensor:
    for w, b in zip(params.weights, params.biases):
        x = relu(linear(x, w, b))
    # no activation on the readout; the regression output stays unbounded
    return linear(x, params.readout_w, params.readout_b)


def fuse_mlp(p_x: Tensor, p_y: Tensor, p_z: Tensor, params: FusionParams) -> Tensor:
    """Pyramid MLP over the (1,3) vector of view predictions -> (1,1)."""
    return _pyramid(concat([p_x, p_y, p_z], axis=1), params)


def fuse_mean(p_x: Tensor, p_y: Tensor, p_z: Tensor) -> Tensor:
    return scale(add(add(p_x, p_y), p_z), 1.0 / 3.0)


def fuse_best(view_preds: dict[str, Tensor], val_maes: dict[str, float] | None) -> Tensor:
    """Prediction of the view with the lowest validation MAE; ties break in
    x, y, z order. A single available view wins by default."""
    order = [a for a in ("x", "y", "z") if a in view_preds]
    if not order:
        raise ContractError("fuse_best: no view predictions")
    if len(order) == 1:
        return view_preds[order[0]]
    if not val_maes:
        raise ContractError("fuse_best requires per-view validation MAE")
    missing = [a for a in order if a not in val_maes]
    if missing:
        raise ContractError(f"fuse_best: validation MAE missing for views {missing}")
    best = min(order, key=lambda a: (val_maes[a], order.index(a)))
    return view_preds[best]


def fuse_feature_map(
    c_x: Tensor, c_y: Tensor, c_z: Tensor, params: FusionParams
) -> Tensor:
    """Pyramid MLP over the concatenated final class-token states (1, 3D)."""
    widths = (c_x.shape[1], c_y.shape[1], c_z.shape[1])
    if len(set(widths)) != 1:
        raise ShapeMismatchError(f"feature-map fusion needs equal widths, got {widths}")
    joined = concat([c_x, c_y, c_z], axis=1)
    if joined.shape[1] != params.weights[0].shape[0]:
        raise ShapeMismatchError(
            f"feature-map fusion input width {joined.shape[1]} != "
            f"{params.weights[0].shape[0]}"
        )
    return _pyramid(joined, params)
