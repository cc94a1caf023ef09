"""Interpretability tooling.

Two routes to a voxel-aligned importance grid: (a) class-token attention
from each view encoder, upsampled and folded back into the common volume
frame; (b) occlusion sensitivity, re-predicting the evaluation set with a
cube of voxels zeroed at every position of a non-overlapping sweep and
recording the MAE shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trivit import metrics as metrics_mod
from trivit import vit as vit_mod
from trivit import volume as volume_mod
from trivit.errors import ConfigError, ContractError
from trivit.model import TriViewModel
from trivit.vit import AttentionRecord
from trivit.volume import Volume

ATTENTION = "attention"
OCCLUSION = "occlusion"


@dataclass
class SaliencyGrid:
    data: np.ndarray            # (H, W, C) importance per voxel
    kind: str                   # "attention" | "occlusion"
    normalization: str = "raw"  # "raw" | "minmax"
    voxel_mm: float = 2.0
    block_size: int | None = None  # cube edge for occlusion grids

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ContractError(f"saliency grid must be 3D, got {self.data.shape}")

    @property
    def dims(self):
        return tuple(self.data.shape)

    def minmax(self) -> "SaliencyGrid":
        lo = float(self.data.min())
        hi = float(self.data.max())
        span = hi - lo
        scaled = np.zeros_like(self.data) if span == 0 else (self.data - lo) / span
        return SaliencyGrid(scaled, self.kind, "minmax", self.voxel_mm, self.block_size)


def view_attention_map(
    records: list[AttentionRecord],
    view_shape: tuple[int, int, int],
    patch: int,
    method: str = "last_layer",
) -> np.ndarray:
    """Class-token attention over the patch grid of one view.

    ``last_layer``: final-layer class row, averaged over heads. ``rollout``:
    head-averaged matrices get an identity added and rows renormalized, are
    multiplied across layers, and the class row of the product is read out.
    """
    if not records:
        raise ContractError("view_attention_map: no attention records")
    h, w, _ = view_shape
    gh, gw = vit_mod.patch_grid(h, w, patch)
    n_tokens = records[0].weights.shape[0]
    if n_tokens != gh * gw + 1:
        raise ContractError(
            f"records carry {n_tokens} tokens but the view implies {gh * gw + 1}"
        )
    by_layer: dict[int, list[np.ndarray]] = {}
    for rec in records:
        by_layer.setdefault(rec.layer, []).append(rec.weights)
    layer_means = {
        layer: np.mean(np.stack(ws), axis=0, dtype=np.float64)
        for layer, ws in by_layer.items()
    }
    if method == "last_layer":
        class_row = layer_means[max(layer_means)][0, 1:]
    elif method == "rollout":
        rolled = np.eye(n_tokens)
        for layer in sorted(layer_means):
            a = layer_means[layer] + np.eye(n_tokens)
            a /= a.sum(axis=1, keepdims=True)
            rolled = a @ rolled
        class_row = rolled[0, 1:]
    else:
        raise ConfigError(f"unknown attention extraction {method!r}")
    return class_row.reshape(gh, gw).astype(np.float32)


def _upsample_to_view(map2d: np.ndarray, view_shape: tuple[int, int, int], patch: int) -> np.ndarray:
    """Patch-constant upsampling, cropped to true extents, broadcast along
    the channel axis."""
    h, w, c = view_shape
    grid = np.repeat(np.repeat(map2d, patch, axis=0), patch, axis=1)[:h, :w]
    return np.repeat(grid[:, :, None], c, axis=2)


def synthesize_3d_attention(
    maps: dict[str, np.ndarray],
    volume_dims: tuple[int, int, int],
    patch: int,
    combine: str = "mean",
    normalize: bool = True,
) -> SaliencyGrid:
    """Fold the per-view 2D maps into one voxel grid.

    Each map covers its view's in-plane axes; after upsampling and the
    channel broadcast it is inverse-permuted into the volume frame. The
    three volumes combine voxelwise (mean by default, product optional) and
    the result is minmax-normalized.
    """
    missing = [a for a in volume_mod.VIEW_AXES if a not in maps]
    if missing:
        raise ContractError(f"synthesize_3d_attention: maps missing for views {missing}")
    folded = []
    for axis in volume_mod.VIEW_AXES:
        vshape = volume_mod.view_dims(volume_dims, axis)
        gh, gw = vit_mod.patch_grid(vshape[0], vshape[1], patch)
        if maps[axis].shape != (gh, gw):
            raise ContractError(
                f"view {axis} map has shape {maps[axis].shape}, expected {(gh, gw)}"
            )
        view_grid = _upsample_to_view(maps[axis], vshape, patch)
        view = volume_mod.ViewTensor(view_axis=axis, data=view_grid)
        folded.append(volume_mod.unreslice(view))
    if combine == "mean":
        merged = np.mean(folded, axis=0)
    elif combine == "product":
        merged = folded[0] * folded[1] * folded[2]
    else:
        raise ConfigError(f"unknown synthesis mode {combine!r}")
    raw = SaliencyGrid(merged, ATTENTION, "raw")
    return raw.minmax() if normalize else raw


def model_attention_maps(model: TriViewModel, volume_data: np.ndarray,
                         method: str = "last_layer") -> dict[str, np.ndarray]:
    """One eval-mode forward pass with attention capture, per view."""
    result = model.forward(volume_data, train=False, record_attention=True)
    maps = {}
    for axis in model.cfg.views:
        maps[axis] = view_attention_map(
            result.records[axis], model.cfg.view_shape(axis), model.cfg.vit.patch_size,
            method=method,
        )
    return maps


def mean_attention_maps(model: TriViewModel, volumes: list[np.ndarray],
                        method: str = "last_layer") -> dict[str, np.ndarray]:
    """Per-view maps averaged over an evaluation set (set-level, matching
    what the occlusion sweep measures)."""
    if not volumes:
        raise ContractError("mean_attention_maps: empty evaluation set")
    acc: dict[str, np.ndarray] = {}
    for data in volumes:
        for axis, m in model_attention_maps(model, data, method=method).items():
            acc[axis] = m if axis not in acc else acc[axis] + m
    return {a: m / len(volumes) for a, m in acc.items()}


@dataclass
class OcclusionConfig:
    cube_size: int = 7
    fill_value: float | None = 0.0  # None keeps original voxels (debug no-op)
    stride: int | None = None       # None -> cube_size (non-overlapping)

    def __post_init__(self):
        if self.cube_size < 1:
            raise ConfigError("cube_size must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else self.cube_size


def occlusion_positions(dims: tuple[int, int, int], cfg: OcclusionConfig):
    """Cube origins tiling the grid; boundary cubes are clipped, never
    skipped, so every voxel is covered."""
    if any(cfg.cube_size > d for d in dims):
        raise ConfigError(
            f"occlusion cube {cfg.cube_size} exceeds volume dims {dims}"
        )
    s = cfg.effective_stride
    return [
        (i, j, k)
        for i in range(0, dims[0], s)
        for j in range(0, dims[1], s)
        for k in range(0, dims[2], s)
    ]


@dataclass
class OcclusionResult:
    grid: SaliencyGrid
    baseline_mae: float
    positions: int


def occlusion_sweep(
    predict_fn,
    volumes: list[np.ndarray],
    ages,
    cfg: OcclusionConfig,
    workers: int = 0,
) -> OcclusionResult:
    """Signed MAE shift per cube: importance = MAE(occluded set) - MAE(baseline).

    ``predict_fn`` maps preprocessed voxel data to a scalar prediction; the
    cube is zeroed (``fill_value``) on that same preprocessed data for every
    volume in the set before re-predicting.
    """
    if not volumes:
        raise ContractError("occlusion_sweep: empty evaluation set")
    ages = np.asarray(ages, dtype=np.float64)
    dims = tuple(volumes[0].shape)
    for v in volumes:
        if tuple(v.shape) != dims:
            raise ContractError("occlusion_sweep: volumes must share dims")
    positions = occlusion_positions(dims, cfg)
    baseline_preds = np.array([predict_fn(v) for v in volumes])
    baseline_mae = metrics_mod.mae(baseline_preds, ages)

    def cell_value(origin):
        sl = tuple(
            slice(o, min(o + cfg.cube_size, d)) for o, d in zip(origin, dims)
        )
        preds = np.empty(len(volumes))
        for vi, vol in enumerate(volumes):
            if cfg.fill_value is None:
                preds[vi] = predict_fn(vol)
                continue
            patched = vol.copy()
            patched[sl] = cfg.fill_value
            preds[vi] = predict_fn(patched)
        return sl, metrics_mod.mae(preds, ages) - baseline_mae

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(cell_value, positions))
    else:
        cells = [cell_value(origin) for origin in positions]

    grid = np.zeros(dims, dtype=np.float32)
    for sl, value in cells:  # position-indexed writes; cubes are disjoint
        grid[sl] = value
    return OcclusionResult(
        grid=SaliencyGrid(grid, OCCLUSION, "raw", block_size=cfg.cube_size),
        baseline_mae=baseline_mae,
        positions=len(positions),
    )


def block_pool(data: np.ndarray, block: int) -> np.ndarray:
    """Mean over non-overlapping blocks; boundary blocks are partial."""
    if block < 1:
        raise ConfigError("block size must be >= 1")
    out_shape = tuple((d + block - 1) // block for d in data.shape)
    out = np.empty(out_shape, dtype=np.float64)
    for i in range(out_shape[0]):
        for j in range(out_shape[1]):
            for k in range(out_shape[2]):
                cell = data[
                    i * block:(i + 1) * block,
                    j * block:(j + 1) * block,
                    k * block:(k + 1) * block,
                ]
                out[i, j, k] = cell.mean()
    return out


def compare_maps(a: SaliencyGrid, b: SaliencyGrid, block: int | None = None) -> float:
    """Spearman rank agreement over cube-resolution cells. Occlusion grids
    are cube-constant, so pooling recovers their cells exactly; attention
    grids are pooled down to match."""
    if a.dims != b.dims:
        raise ContractError(f"saliency dims differ: {a.dims} vs {b.dims}")
    if block is None:
        block = a.block_size or b.block_size or 1
    pa = block_pool(a.data, block).ravel()
    pb = block_pool(b.data, block).ravel()
    return metrics_mod.spearman(pa, pb)


def argmax_voxel(grid: SaliencyGrid) -> tuple[int, int, int]:
    flat = int(np.argmax(grid.data))
    return tuple(int(x) for x in np.unravel_index(flat, grid.data.shape))


def save_saliency(grid: SaliencyGrid, path: str) -> None:
    vol = Volume(data=grid.data, voxel_mm=grid.voxel_mm)
    extra = {"kind": grid.kind, "normalization": grid.normalization}
    if grid.block_size is not None:
        extra["block_size"] = grid.block_size
    volume_mod.save_volume(vol, path, extra_header=extra)


def load_saliency(path: str) -> SaliencyGrid:
    vol = volume_mod.load_volume(path)
    header = volume_mod.load_header(path)
    return SaliencyGrid(
        data=vol.data,
        kind=header.get("kind", ATTENTION),
        normalization=header.get("normalization", "raw"),
        voxel_mm=vol.voxel_mm,
        block_size=header.get("block_size"),
    )


def write_pgm_slice(grid: SaliencyGrid, axis: int, index: int, path: str) -> None:
    """8-bit binary PGM of one orthogonal slice, minmax-scaled."""
    sl = [slice(None)] * 3
    sl[axis] = index
    plane = grid.data[tuple(sl)]
    lo, hi = float(plane.min()), float(plane.max())
    span = hi - lo
    scaled = np.zeros_like(plane) if span == 0 else (plane - lo) / span
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def write_slice_csv(grid: SaliencyGrid, axis: int, index: int, path: str) -> None:
    sl = [slice(None)] * 3
    sl[axis] = index
    plane = grid.data[tuple(sl)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in plane:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
