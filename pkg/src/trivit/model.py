"""The assembled tri-view regressor: three weight-independent view encoders
plus a fusion stage, with a single forward/predict surface for training,
evaluation, and the saliency tools."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trivit import fusion as fusion_mod
from trivit import vit as vit_mod
from trivit import volume as volume_mod
from trivit.numerics import ops as num_ops
from trivit.errors import ConfigError
from trivit.fusion import FusionConfig, FusionParams
from trivit.numerics import Tensor
from trivit.vit import AttentionRecord, ViTConfig, ViTParams, ViewForward
from trivit.volume import Volume


@dataclass
class ModelConfig:
    volume_dims: tuple[int, int, int]
    vit: ViTConfig = field(default_factory=ViTConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    views: tuple[str, ...] = ("x", "y", "z")
    normalize_input: bool = True

    def __post_init__(self):
        self.views = tuple(self.views)
        bad = [v for v in self.views if v not in volume_mod.VIEW_AXES]
        if bad or not self.views:
            raise ConfigError(f"views must be a nonempty subset of x/y/z, got {self.views}")
        if len(self.views) < 3 and self.fusion.strategy in ("mlp", "feature_map"):
            raise ConfigError(
                f"{self.fusion.strategy!r} fusion needs all three views, got {self.views}"
            )

    def view_shape(self, axis: str) -> tuple[int, int, int]:
        return volume_mod.view_dims(self.volume_dims, axis)

    def tokens_per_view(self, axis: str) -> int:
        h, w, _ = self.view_shape(axis)
        return vit_mod.num_patches(h, w, self.vit.patch_size) + 1


@dataclass
class ForwardResult:
    fused: Tensor | None                       # None while training "best"
    view_preds: dict[str, Tensor]
    class_states: dict[str, Tensor]
    records: dict[str, list[AttentionRecord]]


class TriViewModel:
    """Holds parameters for every configured view plus the fusion stage."""

    def __init__(self, cfg: ModelConfig, vit_params: dict[str, ViTParams],
                 fusion_params: FusionParams | None):
        self.cfg = cfg
        self.vit_params = vit_params
        self.fusion_params = fusion_params
        # per-view validation MAE, filled by training; needed by "best" fusion
        self.view_val_mae: dict[str, float] | None = None

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        vit_params = {
            axis: vit_mod.init_vit_params(cfg.view_shape(axis), cfg.vit, rng, dtype=dtype)
            for axis in cfg.views
        }
        fusion_params = fusion_mod.init_fusion_params(
            cfg.fusion, cfg.vit.embed_dim, rng, dtype=dtype
        )
        return cls(cfg, vit_params, fusion_params)

    def parameters(self):
        """(name, tensor) pairs in a fixed deterministic order."""
        for axis in self.cfg.views:
            for name, t in self.vit_params[axis].named():
                yield f"vit.{axis}.{name}", t
        if self.fusion_params is not None:
            for name, t in self.fusion_params.named():
                yield f"fusion.{name}", t

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()

    def forward_views(self, volume_data: np.ndarray, train: bool = False,
                      rng: np.random.Generator | None = None,
                      record_attention: bool = False) -> dict[str, ViewForward]:
        out = {}
        for axis in self.cfg.views:
            view = volume_mod.reslice_one(volume_data, axis)
            out[axis] = vit_mod.forward_view(
                view, self.vit_params[axis], self.cfg.vit,
                train=train, rng=rng, record_attention=record_attention,
            )
        return out

    def forward(self, volume_data: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None,
                record_attention: bool = False) -> ForwardResult:
        views = self.forward_views(volume_data, train=train, rng=rng,
                                   record_attention=record_attention)
        preds = {a: vf.prediction for a, vf in views.items()}
        states = {a: vf.class_state for a, vf in views.items()}
        strategy = self.cfg.fusion.strategy
        if strategy == "mlp":
            fused = fusion_mod.fuse_mlp(preds["x"], preds["y"], preds["z"], self.fusion_params)
        elif strategy == "mean":
            order = [preds[a] for a in self.cfg.views]
            if len(order) == 3:
                fused = fusion_mod.fuse_mean(order[0], order[1], order[2])
            elif len(order) == 1:
                fused = order[0]
            else:
                fused = num_ops.scale(num_ops.add(order[0], order[1]), 0.5)
        elif strategy == "feature_map":
            fused = fusion_mod.fuse_feature_map(
                states["x"], states["y"], states["z"], self.fusion_params
            )
        else:  # best: defined only once validation MAEs exist
            if len(self.cfg.views) == 1 or self.view_val_mae:
                fused = fusion_mod.fuse_best(preds, self.view_val_mae)
            else:
                fused = None
        return ForwardResult(
            fused=fused,
            view_preds=preds,
            class_states=states,
            records={a: vf.records for a, vf in views.items()},
        )

    def prepare_volume(self, volume: Volume) -> np.ndarray:
        """Eval-time preprocessing. Occlusion masks are applied *after* this,
        matching inputs whose standardization happened upstream."""
        if self.cfg.normalize_input:
            volume = volume_mod.normalize(volume)
        return volume.data

    def predict_prepared(self, volume_data: np.ndarray) -> float:
        """Deterministic eval-mode prediction from preprocessed voxels."""
        result = self.forward(volume_data, train=False)
        return result.fused.item()

    def predict(self, volume: Volume) -> float:
        return self.predict_prepared(self.prepare_volume(volume))
