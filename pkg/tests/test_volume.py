"""Volume data model: file format, normalization, views, augmentation,
synthetic generation."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trivit.errors import ConfigError, DegenerateVolumeError, VolumeFormatError
from trivit.numerics import kernels
from trivit.volume import (
    AugmentConfig,
    SynthConfig,
    Volume,
    augment,
    generate_synthetic_dataset,
    load_manifest,
    load_volume,
    normalize,
    reslice,
    save_volume,
    synth_volume,
    translate,
    unreslice,
    view_dims,
)

RNG = np.random.default_rng(5)


def random_volume(dims=(5, 6, 7), rng=RNG):
    return Volume(data=rng.normal(size=dims).astype(np.float32))


class TestFileFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        vol = random_volume()
        path = str(tmp_path / "v.f32")
        save_volume(vol, path)
        loaded = load_volume(path)
        assert loaded.dims == vol.dims
        assert loaded.voxel_mm == vol.voxel_mm
        assert (loaded.data == vol.data).all()
        # save again: byte-identical payload and header
        path2 = str(tmp_path / "v2.f32")
        save_volume(loaded, path2)
        assert open(path, "rb").read() == open(path2, "rb").read()
        assert open(path + ".json").read() == open(path2 + ".json").read()

    def test_tiny_zero_volume_roundtrips(self, tmp_path):
        vol = Volume(data=np.zeros((2, 2, 2), dtype=np.float32))
        path = str(tmp_path / "z.f32")
        save_volume(vol, path)
        assert (load_volume(path).data == 0).all()

    def test_short_payload_names_byte_counts(self, tmp_path):
        path = str(tmp_path / "bad.f32")
        with open(path + ".json", "w") as fh:
            json.dump({"dims": [91, 109, 91], "voxel_mm": 2.0, "dtype": "f32le"}, fh)
        with open(path, "wb") as fh:
            fh.write(b"\x00" * 100)
        expected = 4 * 91 * 109 * 91
        with pytest.raises(VolumeFormatError, match=f"{expected}.*100"):
            load_volume(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(VolumeFormatError, match="missing"):
            load_volume(str(tmp_path / "nope.f32"))

    def test_nonfinite_payload_rejected(self, tmp_path):
        path = str(tmp_path / "nan.f32")
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with open(path + ".json", "w") as fh:
            json.dump({"dims": [2, 2, 2], "voxel_mm": 2.0, "dtype": "f32le"}, fh)
        with open(path, "wb") as fh:
            fh.write(data.tobytes())
        with pytest.raises(VolumeFormatError, match="non-finite"):
            load_volume(path)


class TestNormalize:
    def test_two_point(self):
        data = np.zeros((1, 1, 2), dtype=np.float32)
        data[0, 0] = [1.0, 3.0]
        out = normalize(Volume(data=data))
        np.testing.assert_allclose(out.data[0, 0], [-1.0, 1.0], atol=1e-6)

    def test_idempotent(self):
        vol = random_volume((8, 8, 8))
        once = normalize(vol)
        twice = normalize(once)
        np.testing.assert_allclose(once.data, twice.data, atol=1e-6)

    def test_stats_within_tolerance(self):
        vol = random_volume((20, 20, 20))
        out = normalize(vol)
        assert abs(out.data.mean(dtype=np.float64)) < 1e-5
        assert abs(out.data.std(dtype=np.float64) - 1.0) < 1e-4

    def test_masked_region_only(self):
        data = RNG.normal(size=(6, 6, 6)).astype(np.float32)
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[:3] = True
        out = normalize(Volume(data=data, mask=mask))
        assert (out.data[~mask] == 0).all()
        vals = out.data[mask].astype(np.float64)
        assert abs(vals.mean()) < 1e-5 and abs(vals.std() - 1) < 1e-4

    def test_constant_region_raises(self):
        with pytest.raises(DegenerateVolumeError):
            normalize(Volume(data=np.ones((3, 3, 3), dtype=np.float32)))


class TestReslice:
    def test_production_view_dims(self):
        dims = (91, 109, 91)
        assert view_dims(dims, "x") == (91, 109, 91)
        assert view_dims(dims, "y") == (91, 91, 109)
        assert view_dims(dims, "z") == (109, 91, 91)

    def test_voxel_appears_at_permuted_index(self):
        vol = random_volume((4, 5, 6))
        vx, vy, vz = reslice(vol)
        i, j, k = 1, 3, 5
        val = vol.data[i, j, k]
        assert vx.data[i, j, k] == val
        assert vy.data[i, k, j] == val
        assert vz.data[j, i, k] == val

    def test_one_hot_volume_single_nonzero_per_view(self):
        data = np.zeros((3, 4, 5), dtype=np.float32)
        data[2, 1, 3] = 1.0
        for view in reslice(Volume(data=data)):
            assert np.count_nonzero(view.data) == 1

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_unreslice_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(2, 8, size=3))
        vol = Volume(data=rng.normal(size=dims).astype(np.float32))
        for view in reslice(vol):
            np.testing.assert_array_equal(unreslice(view), vol.data)


class TestAugment:
    def test_probability_zero_is_identity(self):
        vol = random_volume()
        out = augment(vol, AugmentConfig(apply_probability=0.0), np.random.default_rng(3))
        np.testing.assert_array_equal(out.data, vol.data)

    def test_flip_twice_is_identity(self):
        vol = random_volume()
        np.testing.assert_array_equal(
            np.flip(np.flip(vol.data, axis=1), axis=1), vol.data
        )

    def test_translate_moves_impulse(self):
        data = np.zeros((9, 9, 9), dtype=np.float32)
        data[4, 4, 4] = 1.0
        out = translate(data, (3, 0, 0))
        assert out[7, 4, 4] == 1.0
        assert np.count_nonzero(out) == 1

    def test_translate_inverse_where_not_clipped(self):
        vol = random_volume((8, 8, 8))
        there = translate(vol.data, (2, -1, 3))
        back = translate(there, (-2, 1, -3))
        inner = back[2:6, 1:7, 3:5]
        np.testing.assert_array_equal(inner, vol.data[2:6, 1:7, 3:5])

    def test_output_dims_unchanged(self):
        vol = random_volume((10, 11, 12))
        cfg = AugmentConfig(apply_probability=1.0, max_translation_voxels=3)
        out = augment(vol, cfg, np.random.default_rng(12))
        assert out.dims == vol.dims

    def test_rotation_zero_angle_identity(self):
        vol = random_volume((7, 7, 7))
        out = kernels.rotate_plane(vol.data, 0, 0.0)
        np.testing.assert_allclose(out, vol.data, atol=1e-6)

    def test_rotation_preserves_center_voxel(self):
        data = np.zeros((9, 9, 9), dtype=np.float32)
        data[4, 4, 4] = 1.0
        out = kernels.rotate_plane(data, 2, np.deg2rad(17.0))
        assert out[4, 4, 4] == pytest.approx(1.0, abs=1e-5)

    def test_rotation_quarter_turn_moves_offaxis_voxel(self):
        data = np.zeros((9, 9, 9), dtype=np.float32)
        data[4, 7, 4] = 1.0  # 3 voxels off-center in the W axis
        out = kernels.rotate_plane(data, 2, np.deg2rad(90.0))
        # source coords rotate by +90 in the (H, W) plane, so content at
        # offset (0, +3) lands at offset (-3, 0)
        assert out[1, 4, 4] == pytest.approx(1.0, abs=1e-5)
        assert out[4, 7, 4] == pytest.approx(0.0, abs=1e-5)

    def test_rotation_inverse_angle_restores_impulse(self):
        data = np.zeros((9, 9, 9), dtype=np.float32)
        data[4, 7, 4] = 1.0
        there = kernels.rotate_plane(data, 2, np.deg2rad(90.0))
        back = kernels.rotate_plane(there, 2, np.deg2rad(-90.0))
        np.testing.assert_allclose(back, data, atol=1e-5)


class TestSynthetic:
    def test_seed_determinism(self, tmp_path):
        cfg = SynthConfig(n=6, dims=(8, 8, 8), region_origin=(0, 0, 0), region_size=4)
        m1 = generate_synthetic_dataset(str(tmp_path / "a"), cfg, seed=11)
        m2 = generate_synthetic_dataset(str(tmp_path / "b"), cfg, seed=11)
        for r1, r2 in zip(m1.records, m2.records):
            assert r1.age == r2.age and r1.split == r2.split
            b1 = open(m1.resolve(r1), "rb").read()
            b2 = open(m2.resolve(r2), "rb").read()
            assert b1 == b2
        assert (
            open(tmp_path / "a" / "manifest.csv", "rb").read()
            == open(tmp_path / "b" / "manifest.csv", "rb").read()
        )

    def test_noiseless_region_mean_recovers_age(self):
        cfg = SynthConfig(
            n=1, dims=(10, 10, 10), noise_std=0.0,
            region_origin=(2, 3, 4), region_size=5, age_scale=0.01,
        )
        age = 47.25
        vol = synth_volume(cfg, age, np.random.default_rng(0))
        region_mean = float(vol.data[cfg.region_slices].mean(dtype=np.float64))
        assert region_mean / cfg.age_scale == pytest.approx(age, abs=1e-3)

    def test_manifest_roundtrip(self, tmp_path):
        cfg = SynthConfig(n=8, dims=(8, 8, 8), region_origin=(1, 1, 1), region_size=4)
        manifest = generate_synthetic_dataset(str(tmp_path / "d"), cfg, seed=2)
        loaded = load_manifest(str(tmp_path / "d" / "manifest.csv"))
        assert [r.path for r in loaded.records] == [r.path for r in manifest.records]
        assert [r.age for r in loaded.records] == [r.age for r in manifest.records]
        total = sum(len(loaded.split(s)) for s in ("train", "val", "test"))
        assert total == 8

    def test_n_zero_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(n=0)

    def test_region_outside_volume_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(n=1, dims=(8, 8, 8), region_origin=(5, 5, 5), region_size=7)

    def test_ages_in_range_and_split_fractions(self, tmp_path):
        cfg = SynthConfig(n=32, dims=(8, 8, 8), region_origin=(0, 0, 0), region_size=4)
        manifest = generate_synthetic_dataset(str(tmp_path / "s"), cfg, seed=4)
        ages = [r.age for r in manifest.records]
        assert all(20.0 <= a <= 80.0 for a in ages)
        assert len(manifest.split("train")) == 22
        assert len(manifest.split("val")) == 5
        assert len(manifest.split("test")) == 5
