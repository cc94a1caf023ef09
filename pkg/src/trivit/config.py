"""Run configuration: one nested JSON document drives every command.

Production defaults carry the published training regime (patch 7, embed
768, 12 heads, 10 layers, ADAM 1e-3 with 1e-6 inverse-time decay, L2 5e-4,
batch 100, seed 3407). The desk preset keeps every structural law intact
but shrinks the model and dataset so the whole pipeline runs on a laptop
CPU. Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from trivit.errors import ConfigError
from trivit.fusion import FusionConfig
from trivit.model import ModelConfig
from trivit.training import TrainConfig
from trivit.vit import ViTConfig
from trivit.volume import AugmentConfig, SynthConfig

PRODUCTION_DEFAULTS: dict = {
    "seed": 3407,
    "volume": {"dims": [91, 109, 91], "voxel_mm": 2.0, "normalize": True},
    "synth": {
        "n": 32,
        "age_range": [20.0, 80.0],
        "age_scale": 0.01,
        "noise_std": 0.02,
        "region_origin": [49, 28, 28],
        "region_size": 7,
        "split_fractions": [0.7, 0.15, 0.15],
    },
    "augment": {
        "apply_probability": 0.5,
        "max_translation_voxels": 10,
        "rotation_range_deg": 20.0,
        "flips_enabled": True,
    },
    "vit": {
        "patch_size": 7,
        "embed_dim": 768,
        "num_heads": 12,
        "num_layers": 10,
        "dropout": 0.1,
        "mlp_hidden": 3072,
        "head_hidden": None,
        "attn_output_projection": True,
    },
    "fusion": {
        "strategy": "mlp",
        "widths": [3, 128, 256, 512, 1024, 512, 256, 128, 3],
    },
    "views": ["x", "y", "z"],
    "train": {
        "learning_rate": 1e-3,
        "lr_decay": 1e-6,
        "lr_decay_scope": "step",
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "weight_decay": 5e-4,
        "batch_size": 100,
        "epochs": 10,
        "parallel_workers": 0,
    },
    "occlusion": {"cube_size": 7, "fill_value": 0.0, "stride": None},
    "explain": {"attention_extraction": "last_layer", "synthesis": "mean"},
    "ablate": {
        "fusions": ["mlp", "mean", "best", "feature_map"],
        "single_views": True,
        "depth_sweep": [],
    },
    "paths": {"data_dir": "data", "out_dir": "runs/run"},
}

# Desk preset: every deviation from production is calibrated scale, not
# semantics. Augmentation stays off so the overfit oracle is meaningful.
# The learning rate and the synthetic age range are sized together: ADAM
# moves each weight about lr per step, and the desk run has only ~600
# steps, so the target magnitude must be reachable within that travel.
# noise_std is set high enough that per-volume standardization keeps the
# region signal nearly linear (with a quiet background the region would
# dominate the variance and normalization would divide the signal away).
DESK_OVERRIDES: dict = {
    "volume": {"dims": [28, 28, 28]},
    "synth": {
        "region_origin": [14, 7, 7],
        "age_range": [1.0, 9.0],
        "age_scale": 0.05,
        "noise_std": 0.2,
    },
    "augment": {"apply_probability": 0.0, "max_translation_voxels": 2},
    "vit": {"embed_dim": 64, "num_heads": 4, "num_layers": 2, "mlp_hidden": 128},
    "fusion": {"widths": [3, 16, 32, 16, 3]},
    "train": {"batch_size": 8, "epochs": 200, "learning_rate": 0.02},
    "paths": {"data_dir": "data/desk", "out_dir": "runs/desk"},
}

PRESETS = {"production": {}, "desk": DESK_OVERRIDES}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], value, prefix=f"{where}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(PRODUCTION_DEFAULTS))

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def volume_dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.raw["volume"]["dims"])

    def synth_config(self) -> SynthConfig:
        s = self.raw["synth"]
        return SynthConfig(
            n=int(s["n"]),
            dims=self.volume_dims,
            voxel_mm=float(self.raw["volume"]["voxel_mm"]),
            age_range=tuple(float(a) for a in s["age_range"]),
            age_scale=float(s["age_scale"]),
            noise_std=float(s["noise_std"]),
            region_origin=tuple(int(o) for o in s["region_origin"]),
            region_size=int(s["region_size"]),
            split_fractions=tuple(float(f) for f in s["split_fractions"]),
        )

    def augment_config(self) -> AugmentConfig:
        a = self.raw["augment"]
        return AugmentConfig(
            apply_probability=float(a["apply_probability"]),
            max_translation_voxels=int(a["max_translation_voxels"]),
            rotation_range_deg=float(a["rotation_range_deg"]),
            flips_enabled=bool(a["flips_enabled"]),
        )

    def vit_config(self) -> ViTConfig:
        v = self.raw["vit"]
        return ViTConfig(
            patch_size=int(v["patch_size"]),
            embed_dim=int(v["embed_dim"]),
            num_heads=int(v["num_heads"]),
            num_layers=int(v["num_layers"]),
            dropout=float(v["dropout"]),
            mlp_hidden=int(v["mlp_hidden"]),
            head_hidden=None if v["head_hidden"] is None else int(v["head_hidden"]),
            attn_output_projection=bool(v["attn_output_projection"]),
        )

    def fusion_config(self) -> FusionConfig:
        f = self.raw["fusion"]
        return FusionConfig(strategy=str(f["strategy"]), widths=[int(w) for w in f["widths"]])

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            volume_dims=self.volume_dims,
            vit=self.vit_config(),
            fusion=self.fusion_config(),
            views=tuple(self.raw["views"]),
            normalize_input=bool(self.raw["volume"]["normalize"]),
        )

    def train_config(self, serial: bool = False) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            learning_rate=float(t["learning_rate"]),
            lr_decay=float(t["lr_decay"]),
            lr_decay_scope=str(t["lr_decay_scope"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            adam_eps=float(t["adam_eps"]),
            weight_decay=float(t["weight_decay"]),
            batch_size=int(t["batch_size"]),
            epochs=int(t["epochs"]),
            seed=self.seed,
            parallel_workers=0 if serial else int(t["parallel_workers"]),
        )

    def occlusion_config(self):
        from trivit.explain import OcclusionConfig

        o = self.raw["occlusion"]
        return OcclusionConfig(
            cube_size=int(o["cube_size"]),
            fill_value=None if o["fill_value"] is None else float(o["fill_value"]),
            stride=None if o["stride"] is None else int(o["stride"]),
        )

    @property
    def data_dir(self) -> str:
        return str(self.raw["paths"]["data_dir"])

    @property
    def out_dir(self) -> str:
        return str(self.raw["paths"]["out_dir"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def make_config(overrides: dict | None = None, preset: str = "desk",
                seed: int | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRODUCTION_DEFAULTS, PRESETS[preset])
    if overrides:
        merged = _merge(merged, overrides)
    if seed is not None:
        merged["seed"] = int(seed)
    cfg = RunConfig(raw=merged)
    # construct every sub-config now so bad values fail at load time
    cfg.synth_config()
    cfg.augment_config()
    cfg.model_config()
    cfg.train_config()
    cfg.occlusion_config()
    if cfg.raw["explain"]["attention_extraction"] not in ("last_layer", "rollout"):
        raise ConfigError(
            f"explain.attention_extraction {cfg.raw['explain']['attention_extraction']!r} invalid"
        )
    if cfg.raw["explain"]["synthesis"] not in ("mean", "product"):
        raise ConfigError(f"explain.synthesis {cfg.raw['explain']['synthesis']!r} invalid")
    return cfg


def load_config(path: str | None, preset: str = "desk", seed: int | None = None) -> RunConfig:
    """Load overrides from a JSON file on top of a preset; None -> preset
    defaults. The file may itself name a ``preset``."""
    overrides = None
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                overrides = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {path}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"config root must be an object: {path}")
        preset = overrides.pop("preset", preset)
    return make_config(overrides, preset=preset, seed=seed)
