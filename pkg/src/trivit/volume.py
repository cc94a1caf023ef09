"""Volumetric data model.

Loading/saving the raw-payload-plus-JSON-header file format, in-mask
standardization, the three axis-permuted views, train-time spatial
augmentation, and the synthetic dataset generator used for desk-scale
verification.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from trivit.errors import ConfigError, ContractError, DegenerateVolumeError, VolumeFormatError
from trivit.numerics import kernels

PAYLOAD_DTYPE = "f32le"

# volume axes -> view axes, matching the (H,W,C) / (H,C,W) / (W,H,C) layout
VIEW_AXES = ("x", "y", "z")
VIEW_PERMUTATIONS = {"x": (0, 1, 2), "y": (0, 2, 1), "z": (1, 0, 2)}


@dataclass
class Volume:
    """Dense 3D scalar grid. ``data`` is (H, W, C) float32, row-major.

    ``mask`` marks the in-brain region; None means the whole grid counts.
    """

    data: np.ndarray
    voxel_mm: float = 2.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ContractError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise ContractError(
                    f"mask shape {self.mask.shape} != data shape {self.data.shape}"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class ViewTensor:
    """One axis-permuted view of a volume: 2D in-plane axes plus channels."""

    view_axis: str
    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def header_path(path: str) -> str:
    return path + ".json"


def save_volume(volume: Volume, path: str, extra_header: dict | None = None) -> None:
    """Raw little-endian float32 payload at ``path``, JSON header alongside."""
    header = {
        "dims": list(volume.dims),
        "voxel_mm": float(volume.voxel_mm),
        "dtype": PAYLOAD_DTYPE,
    }
    if extra_header:
        header.update(extra_header)
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(header_path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(header, fh, sort_keys=True)
        fh.write("\n")


def load_volume(path: str) -> Volume:
    """Inverse of save_volume; validates header against payload byte count."""
    hpath = header_path(path)
    if not os.path.exists(path):
        raise VolumeFormatError(f"payload file missing: {path}")
    if not os.path.exists(hpath):
        raise VolumeFormatError(f"header file missing: {hpath}")
    try:
        with open(hpath, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"header is not valid JSON: {hpath}: {exc}") from exc
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d >= 1 for d in dims)
    ):
        raise VolumeFormatError(f"header dims invalid: {dims!r}")
    if header.get("dtype") != PAYLOAD_DTYPE:
        raise VolumeFormatError(f"unsupported payload dtype: {header.get('dtype')!r}")
    with open(path, "rb") as fh:
        payload = fh.read()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length mismatch for {path}: expected {expected} bytes "
            f"for dims {tuple(dims)}, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.isfinite(data).all():
        raise VolumeFormatError(f"payload contains non-finite values: {path}")
    return Volume(data=data.copy(), voxel_mm=float(header.get("voxel_mm", 2.0)))


def load_header(path: str) -> dict:
    with open(header_path(path), "r", encoding="utf-8") as fh:
        return json.load(fh)


def normalize(volume: Volume) -> Volume:
    """Standardize in-mask voxels to mean 0 / std 1; zero elsewhere."""
    sel = volume.mask if volume.mask is not None else np.ones(volume.dims, dtype=bool)
    vals = volume.data[sel].astype(np.float64)
    if vals.size < 2:
        raise DegenerateVolumeError(f"normalize needs >= 2 in-mask voxels, got {vals.size}")
    mean = vals.mean()
    std = vals.std()
    if std == 0.0:
        raise DegenerateVolumeError("normalize: in-mask region has zero variance")
    out = np.zeros(volume.dims, dtype=np.float32)
    out[sel] = ((vals - mean) / std).astype(np.float32)
    return Volume(data=out, voxel_mm=volume.voxel_mm, mask=volume.mask)


def reslice(volume: Volume) -> tuple[ViewTensor, ViewTensor, ViewTensor]:
    """The three axis permutations: (H,W,C), (H,C,W), (W,H,C)."""
    views = []
    for axis in VIEW_AXES:
        perm = VIEW_PERMUTATIONS[axis]
        views.append(
            ViewTensor(view_axis=axis, data=np.ascontiguousarray(np.transpose(volume.data, perm)))
        )
    return tuple(views)


def reslice_one(data: np.ndarray, axis: str) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(data, VIEW_PERMUTATIONS[axis]))


def unreslice(view: ViewTensor) -> np.ndarray:
    """Inverse permutation: recovers the source volume array exactly."""
    perm = VIEW_PERMUTATIONS[view.view_axis]
    inverse = tuple(np.argsort(perm))
    return np.ascontiguousarray(np.transpose(view.data, inverse))


def view_dims(volume_dims: tuple[int, int, int], axis: str) -> tuple[int, int, int]:
    perm = VIEW_PERMUTATIONS[axis]
    return tuple(volume_dims[p] for p in perm)


@dataclass
class AugmentConfig:
    apply_probability: float = 0.5
    max_translation_voxels: int = 10
    rotation_range_deg: float = 20.0
    flips_enabled: bool = True
    rng_seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError(f"apply_probability {self.apply_probability} outside [0, 1]")
        if self.max_translation_voxels < 0:
            raise ConfigError("max_translation_voxels must be >= 0")
        if self.rotation_range_deg < 0:
            raise ConfigError("rotation_range_deg must be >= 0")


def translate(data: np.ndarray, shifts: tuple[int, int, int]) -> np.ndarray:
    """Integer voxel shift with zero fill."""
    out = np.zeros_like(data)
    src = []
    dst = []
    for extent, s in zip(data.shape, shifts):
        s = int(s)
        if abs(s) >= extent:
            return out
        if s >= 0:
            src.append(slice(0, extent - s))
            dst.append(slice(s, extent))
        else:
            src.append(slice(-s, extent))
            dst.append(slice(0, extent + s))
    out[tuple(dst)] = data[tuple(src)]
    return out


def augment(volume: Volume, cfg: AugmentConfig, rng: np.random.Generator) -> Volume:
    """Spatial augmentation behind one apply gate.

    When the gate passes, translation / rotation / flips each flip their own
    coin; the full random stream is drawn every call so consumption does not
    depend on which branches ran.
    """
    gate = rng.random() < cfg.apply_probability
    do_translate = rng.random() < 0.5
    shifts = rng.integers(-cfg.max_translation_voxels, cfg.max_translation_voxels + 1, size=3)
    do_rotate = rng.random() < 0.5
    rot_axis = int(rng.integers(0, 3))
    angle_deg = float(rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg))
    flip_axes = rng.random(3) < 0.5

    data = volume.data
    if not gate:
        return Volume(data=data.copy(), voxel_mm=volume.voxel_mm, mask=volume.mask)
    if do_translate and cfg.max_translation_voxels > 0:
        data = translate(data, tuple(int(s) for s in shifts))
    if do_rotate and cfg.rotation_range_deg > 0:
        data = kernels.rotate_plane(
            np.ascontiguousarray(data), rot_axis, float(np.deg2rad(angle_deg))
        )
    if cfg.flips_enabled:
        for axis in range(3):
            if flip_axes[axis]:
                data = np.flip(data, axis=axis)
    return Volume(data=np.ascontiguousarray(data), voxel_mm=volume.voxel_mm, mask=volume.mask)


@dataclass
class ManifestRecord:
    path: str
    age: float
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    base_dir: str = "."

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, record: ManifestRecord) -> str:
        return os.path.normpath(os.path.join(self.base_dir, record.path))

    def validate(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ContractError("manifest paths are not unique")
        for r in self.records:
            if not np.isfinite(r.age) or r.age < 0:
                raise ContractError(f"invalid age {r.age} for {r.path}")
            if r.split not in ("train", "val", "test"):
                raise ContractError(f"unknown split {r.split!r} for {r.path}")


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "age", "split"])
        for r in manifest.records:
            writer.writerow([r.path, repr(float(r.age)), r.split])


def load_manifest(path: str) -> DatasetManifest:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "age", "split"]:
            raise VolumeFormatError(f"manifest header invalid: {header!r}")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise VolumeFormatError(f"manifest row invalid: {row!r}")
            records.append(ManifestRecord(path=row[0], age=float(row[1]), split=row[2]))
    manifest = DatasetManifest(records=records, base_dir=os.path.dirname(path) or ".")
    manifest.validate()
    return manifest


@dataclass
class SynthConfig:
    """Synthetic dataset: noise background plus one cubic region whose mean
    intensity is a linear function of the assigned age."""

    n: int = 32
    dims: tuple[int, int, int] = (28, 28, 28)
    voxel_mm: float = 2.0
    age_range: tuple[float, float] = (20.0, 80.0)
    age_scale: float = 0.01           # region intensity = age * age_scale
    noise_std: float = 0.02
    region_origin: tuple[int, int, int] = (14, 7, 7)
    region_size: int = 7
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"synthetic dataset needs n >= 1, got {self.n}")
        for o, d in zip(self.region_origin, self.dims):
            if o < 0 or o + self.region_size > d:
                raise ConfigError(
                    f"region (origin {self.region_origin}, size {self.region_size}) "
                    f"does not fit in volume dims {self.dims}"
                )
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions {self.split_fractions} must sum to 1")

    @property
    def region_slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.region_size) for o in self.region_origin)


def synth_volume(cfg: SynthConfig, age: float, rng: np.random.Generator) -> Volume:
    data = rng.normal(0.0, cfg.noise_std, size=cfg.dims).astype(np.float32)
    data[cfg.region_slices] += np.float32(age * cfg.age_scale)
    return Volume(data=data, voxel_mm=cfg.voxel_mm)


def assign_splits(n: int, fractions: tuple[float, float, float], rng: np.random.Generator):
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    order = rng.permutation(n)
    splits = [""] * n
    for pos, idx in enumerate(order):
        if pos < n_train:
            splits[idx] = "train"
        elif pos < n_train + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "test"
    return splits


def generate_synthetic_dataset(out_dir: str, cfg: SynthConfig, seed: int) -> DatasetManifest:
    """Writes n volumes plus manifest.csv; byte-deterministic for a seed."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5E7)))
    ages = rng.uniform(cfg.age_range[0], cfg.age_range[1], size=cfg.n)
    splits = assign_splits(cfg.n, cfg.split_fractions, rng)
    records = []
    for i in range(cfg.n):
        name = f"vol_{i:04d}.f32"
        vol = synth_volume(cfg, float(ages[i]), rng)
        save_volume(vol, os.path.join(out_dir, name))
        records.append(ManifestRecord(path=name, age=float(ages[i]), split=splits[i]))
    manifest = DatasetManifest(records=records, base_dir=out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest
