import numpy as np
import pytest

from timeflow import nifti
from timeflow.errors import DegenerateImageError, FormatError
from timeflow.imagegrid import (
    LongitudinalSeries,
    PhantomSpec,
    Volume,
    foreground_mask,
    generate_phantom_series,
    load_nifti,
    normalize_intensity,
    read_manifest,
    save_nifti,
    write_manifest,
)
from timeflow.warpfield import warp


def brute_force_percentile(values, q):
    """Independent oracle: sort + linear interpolation between order statistics."""
    s = np.sort(np.asarray(values, dtype=np.float64).ravel())
    pos = (len(s) - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    return s[lo] * (1 - frac) + s[hi] * frac


class TestVolume:
    def test_rejects_non_3d(self):
        with pytest.raises(FormatError):
            Volume(np.zeros((4, 4)))

    def test_rejects_mask_shape_mismatch(self):
        with pytest.raises(Exception):
            Volume(np.zeros((4, 4, 4)), mask=np.ones((4, 4, 5), dtype=bool))

    def test_rejects_nan(self):
        data = np.zeros((4, 4, 4))
        data[0, 0, 0] = np.nan
        with pytest.raises(DegenerateImageError):
            Volume(data)


class TestNiftiIO:
    def test_roundtrip_lossless(self, tmp_path):
        rng = np.random.default_rng(1)
        data = rng.random((6, 7, 8))
        path = str(tmp_path / "vol.nii")
        nifti.write(path, data, spacing=(1.0, 1.25, 2.0), origin=(-3.0, 4.5, 0.0))
        back, spacing, origin = nifti.read(path)
        np.testing.assert_array_equal(back, data)
        assert spacing == pytest.approx((1.0, 1.25, 2.0))
        assert origin == pytest.approx((-3.0, 4.5, 0.0))

    def test_roundtrip_gzip(self, tmp_path):
        data = np.arange(60, dtype=np.float64).reshape(3, 4, 5)
        path = str(tmp_path / "vol.nii.gz")
        nifti.write(path, data)
        back, _, _ = nifti.read(path)
        np.testing.assert_array_equal(back, data)

    def test_load_expected_dims(self, tmp_path):
        path = str(tmp_path / "big.nii")
        nifti.write(path, np.zeros((160, 160, 192), dtype=np.float32), dtype=np.float32)
        vol = load_nifti(path)
        assert vol.dims == (160, 160, 192)

    def test_all_zero_image_has_empty_mask(self, tmp_path):
        path = str(tmp_path / "zero.nii")
        nifti.write(path, np.zeros((8, 8, 8)))
        vol = load_nifti(path)
        assert vol.mask is not None and not vol.mask.any()

    def test_4d_file_rejected(self, tmp_path):
        path = str(tmp_path / "vec.nii")
        nifti.write(path, np.zeros((4, 4, 4, 3)))
        with pytest.raises(FormatError):
            load_nifti(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOError):
            load_nifti(str(tmp_path / "nope.nii"))

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "junk.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(FormatError):
            nifti.read(str(path))

    def test_volume_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        data = rng.random((5, 6, 7))
        vol = Volume(data, spacing=(1, 1, 1.5), origin=(0, -2, 3))
        path = str(tmp_path / "v.nii")
        save_nifti(vol, path)
        back = load_nifti(path)
        np.testing.assert_array_equal(back.data, vol.data)
        assert back.spacing == pytest.approx(vol.spacing)
        assert back.origin == pytest.approx(vol.origin)


class TestNormalize:
    def test_uniform_ramp_matches_sort_oracle(self):
        # foreground values 0..1000, one each
        data = np.zeros((11, 13, 8))
        vals = np.arange(1001, dtype=np.float64)
        data.flat[: len(vals)] = vals
        mask = np.zeros(data.shape, dtype=bool)
        mask.flat[: len(vals)] = True
        vol = Volume(data, mask=mask)
        out = normalize_intensity(vol)
        p_lo = brute_force_percentile(vals, 0.0)
        p_hi = brute_force_percentile(vals, 99.9)
        assert p_lo == 0.0
        assert p_hi == pytest.approx(999.0)
        assert out.data[mask].max() == pytest.approx((1000.0 - p_lo) / (p_hi - p_lo))
        assert out.data[mask].max() == pytest.approx(1.001, abs=1e-3)

    def test_full_range_image_nearly_unchanged(self):
        rng = np.random.default_rng(3)
        data = rng.random((12, 12, 12))
        data[0, 0, 0], data[1, 1, 1] = 0.0, 1.0  # pin the range endpoints
        vol = Volume(data, mask=np.ones(data.shape, dtype=bool))
        out = normalize_intensity(vol)
        assert np.abs(out.data - data).max() < 5e-3  # only the tiny p99.9 offset

    def test_constant_image_raises(self):
        vol = Volume(np.full((6, 6, 6), 2.5), mask=np.ones((6, 6, 6), dtype=bool))
        with pytest.raises(DegenerateImageError):
            normalize_intensity(vol)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        data = rng.random((10, 10, 10)) * 800
        vol = Volume(data, mask=data > 1)
        once = normalize_intensity(vol)
        twice = normalize_intensity(once)
        assert np.abs(twice.data - once.data).max() < 1e-6

    def test_foreground_values_land_in_unit_range(self):
        rng = np.random.default_rng(11)
        data = np.clip(rng.normal(300, 80, (16, 16, 16)), 0, None)
        vol = Volume(data, mask=data > 0)
        out = normalize_intensity(vol)
        fg = out.data[vol.mask]
        assert fg.min() >= 0.0
        assert 1.0 < fg.max() < 1.5  # the top 0.1% overshoots 1 and is kept


class TestForegroundMask:
    def test_closing_fills_pinholes(self):
        data = np.zeros((12, 12, 12))
        data[3:9, 3:9, 3:9] = 1.0
        data[5, 5, 5] = 0.0  # interior pinhole
        mask = foreground_mask(data)
        assert mask[5, 5, 5]
        assert not mask[0, 0, 0]

    def test_empty(self):
        assert not foreground_mask(np.zeros((4, 4, 4))).any()


class TestSeries:
    def test_requires_two_visits(self):
        vol = Volume(np.ones((4, 4, 4)))
        with pytest.raises(ValueError):
            LongitudinalSeries("s", [(vol, 0.0, "CN")])

    def test_requires_increasing_ages(self):
        vol = Volume(np.ones((4, 4, 4)))
        with pytest.raises(ValueError):
            LongitudinalSeries("s", [(vol, 1.0, "CN"), (vol, 1.0, "CN")])


class TestPhantom:
    def test_zero_rate_gives_identical_visits_and_zero_fields(self):
        spec = PhantomSpec(dims=(24, 24, 24), atrophy_rate=0.0, seed=4)
        series, fields = generate_phantom_series(spec, [0.0, 1.0, 2.0])
        v0, v1, v2 = series.volumes
        np.testing.assert_array_equal(v0.data, v1.data)
        np.testing.assert_array_equal(v0.data, v2.data)
        for f in fields:
            assert np.abs(f.u).max() == 0.0

    def test_linear_expansion_scales_fields(self):
        spec = PhantomSpec(dims=(24, 24, 24), atrophy_rate=0.8, seed=4)
        _, fields = generate_phantom_series(spec, [0.0, 1.0, 2.0])
        np.testing.assert_allclose(fields[2].u, 2.0 * fields[1].u, atol=1e-12)

    def test_deterministic(self):
        spec = PhantomSpec(dims=(20, 20, 20), atrophy_rate=0.5, noise_sigma=0.02, seed=9)
        s1, f1 = generate_phantom_series(spec, [0.0, 2.0])
        s2, f2 = generate_phantom_series(spec, [0.0, 2.0])
        for a, b in zip(s1.volumes, s2.volumes):
            np.testing.assert_array_equal(a.data, b.data)
        for a, b in zip(f1, f2):
            np.testing.assert_array_equal(a.u, b.u)

    def test_ground_truth_field_reproduces_later_visit(self):
        sigma = 0.02
        spec = PhantomSpec(dims=(32, 32, 32), atrophy_rate=1.0, noise_sigma=sigma, seed=2)
        series, fields = generate_phantom_series(spec, [0.0, 2.0])
        v0, v1 = series.volumes
        warped = warp(v0, fields[1])
        mask = series.volumes[0].mask
        mae = np.abs(warped.data - v1.data)[mask].mean()
        noise_floor = 2.0 * sigma / np.sqrt(np.pi)  # E|n1 - n2| for iid gaussians
        assert mae < noise_floor

    def test_anatomical_times_decouple_from_ages(self):
        spec = PhantomSpec(dims=(20, 20, 20), atrophy_rate=1.0, seed=4)
        _, normal = generate_phantom_series(spec, [0.0, 1.0, 2.0])
        _, accel = generate_phantom_series(
            spec, [0.0, 1.0, 2.0], anatomical_times=[0.0, 1.0, 2.5]
        )
        np.testing.assert_allclose(accel[2].u, 2.5 * normal[1].u, atol=1e-12)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        spec = PhantomSpec(dims=(16, 16, 16), atrophy_rate=0.5, seed=1)
        series, _ = generate_phantom_series(spec, [0.0, 1.5], subject_id="s1", diagnosis="CN")
        rows = []
        for i, (vol, age, dx) in enumerate(series.visits):
            p = f"s1_v{i}.nii"
            save_nifti(vol, str(tmp_path / p))
            rows.append({"subject_id": "s1", "path": p, "age_years": age, "diagnosis": dx})
        manifest = str(tmp_path / "manifest.csv")
        write_manifest(rows, manifest)
        loaded = read_manifest(manifest)
        assert len(loaded) == 1
        assert loaded[0].subject_id == "s1"
        assert loaded[0].ages == [0.0, 1.5]
        assert loaded[0].visits[0][2] == "CN"
