import numpy as np
import pytest

from timeflow.errors import EmptyMaskError
from timeflow.imagegrid import Volume
from timeflow.metrics import (
    SIMPLEX_TETS,
    mae,
    ndv,
    psnr,
    sdlogj,
    simplex_determinants,
    temporal_smoothness,
)
from timeflow.warpfield import DisplacementField, identity_field


def brute_force_ndv(u, mask=None, spacing=(1.0, 1.0, 1.0)):
    """Independent oracle: loop over cells and tets, numpy det on each simplex."""
    dims = u.shape[:3]
    corners = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    total = 0.0
    for i in range(dims[0] - 1):
        for j in range(dims[1] - 1):
            for k in range(dims[2] - 1):
                if mask is not None and not mask[i, j, k]:
                    continue
                pos = {}
                for idx, (dx, dy, dz) in enumerate(corners):
                    x = np.array([i + dx, j + dy, k + dz], dtype=np.float64)
                    pos[idx] = x + u[i + dx, j + dy, k + dz]
                bad = 0
                for v0, v1, v2, v3 in SIMPLEX_TETS:
                    m = np.stack([pos[v1] - pos[v0], pos[v2] - pos[v0], pos[v3] - pos[v0]], axis=-1)
                    if np.linalg.det(m) <= 0:
                        bad += 1
                total += bad / len(SIMPLEX_TETS)
    return total * float(np.prod(spacing))


def folding_field(dims=(8, 8, 8)):
    """u_x = -2x along one line of voxels: reverses order, guaranteed fold."""
    u = np.zeros((*dims, 3))
    xs = np.arange(dims[0], dtype=np.float64)
    u[:, 4, 4, 0] = -2.0 * xs
    return DisplacementField(u)


class TestMAE:
    def test_identical(self):
        rng = np.random.default_rng(0)
        a = Volume(rng.random((8, 8, 8)))
        assert mae(a, a) == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        a = Volume(rng.random((8, 8, 8)))
        b = a.with_data(a.data + 0.05)
        assert mae(a, b) == pytest.approx(0.05)

    def test_empty_mask(self):
        a = Volume(np.zeros((4, 4, 4)))
        with pytest.raises(EmptyMaskError):
            mae(a, a, mask=np.zeros((4, 4, 4), dtype=bool))

    def test_background_zeros_dilute_the_mean(self):
        # enlarging the mask into zero background can only lower MAE
        rng = np.random.default_rng(2)
        a = np.zeros((10, 10, 10))
        b = np.zeros((10, 10, 10))
        core = np.zeros((10, 10, 10), dtype=bool)
        core[3:7, 3:7, 3:7] = True
        a[core] = rng.random(core.sum())
        b[core] = rng.random(core.sum())
        tight = mae(a, b, mask=core)
        loose = mae(a, b, mask=np.ones_like(core))
        assert loose < tight


class TestPSNR:
    def test_known_mse(self):
        a = np.zeros((10, 10, 10))
        b = np.full((10, 10, 10), 0.1)  # MSE = 0.01
        assert psnr(a, b, peak=1.0) == pytest.approx(20.0)

    def test_identical_capped(self):
        a = np.ones((6, 6, 6))
        assert psnr(a, a) == 100.0

    def test_doubling_noise_costs_six_db(self):
        rng = np.random.default_rng(3)
        a = np.zeros((32, 32, 32))
        n = rng.standard_normal(a.shape)
        p1 = psnr(a, a + 0.01 * n)
        p2 = psnr(a, a + 0.02 * n)
        assert p1 - p2 == pytest.approx(6.02, abs=0.1)


class TestSDlogJ:
    def test_identity_is_zero(self):
        assert sdlogj(identity_field((8, 8, 8))) == 0.0

    def test_uniform_scaling_is_zero(self):
        dims = (10, 10, 10)
        grids = np.stack(
            np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"),
            axis=-1,
        )
        phi = DisplacementField(0.05 * grids)  # det constant = 1.05^3
        assert sdlogj(phi) == pytest.approx(0.0, abs=1e-10)

    def test_two_point_distribution(self):
        # det=1 in one slab, det=e in another -> std of log over them is 0.5
        dims = (12, 8, 8)
        u = np.zeros((*dims, 3))
        xs = np.arange(dims[0], dtype=np.float64)
        c = np.e - 1.0
        u[xs >= 6, :, :, 0] = (c * (xs[xs >= 6] - 6.0))[:, None, None]
        mask = np.zeros(dims, dtype=bool)
        mask[1:3] = True   # det exactly 1 here
        mask[8:10] = True  # det exactly e here (away from the slab junction)
        got = sdlogj(DisplacementField(u), mask=mask)
        assert got == pytest.approx(0.5, abs=1e-12)


class TestNDV:
    def test_identity_zero(self):
        assert ndv(identity_field((8, 8, 8))) == 0.0

    def test_folding_field_positive_and_matches_bruteforce(self):
        phi = folding_field((8, 8, 8))
        fast = ndv(phi)
        slow = brute_force_ndv(phi.u)
        assert fast > 0
        assert fast == slow  # exact agreement, same simplices

    def test_random_smooth_matches_bruteforce_exactly(self):
        from scipy import ndimage

        rng = np.random.default_rng(4)
        u = rng.standard_normal((9, 9, 9, 3))
        for i in range(3):
            u[..., i] = ndimage.gaussian_filter(u[..., i], 1.5)
        u *= 2.5 / np.abs(u).max()  # strong enough to fold somewhere
        phi = DisplacementField(u)
        assert ndv(phi) == brute_force_ndv(u)

    def test_small_smooth_field_is_diffeomorphic(self):
        from scipy import ndimage

        rng = np.random.default_rng(5)
        u = rng.standard_normal((10, 10, 10, 3))
        for i in range(3):
            u[..., i] = ndimage.gaussian_filter(u[..., i], 2.0)
        u *= 0.3 / np.linalg.norm(u, axis=-1).max()
        phi = DisplacementField(u)
        assert ndv(phi) == 0.0
        assert simplex_determinants(phi).min() > 0

    def test_voxel_volume_scaling(self):
        phi = folding_field((8, 8, 8))
        assert ndv(phi, spacing=(2.0, 1.0, 1.0)) == pytest.approx(2.0 * ndv(phi))

    def test_zero_consistency_with_min_simplex(self):
        # ndv == 0 iff every simplex determinant is positive
        phi = folding_field((6, 6, 6))
        dets = simplex_determinants(phi)
        assert (ndv(phi) == 0.0) == bool(dets.min() > 0)


class LinearFamily:
    def __init__(self, p):
        self.p = p

    def __call__(self, x0, xl, t, span):
        import torch

        u = x0.new_zeros((x0.shape[0], 3, *x0.shape[2:]))
        for i in range(3):
            u[:, i] = float(t) * self.p[i]
        return u


class TestTemporalSmoothness:
    def test_identity_family_is_zero(self):
        rng = np.random.default_rng(6)
        a = Volume(rng.random((8, 8, 8)))
        b = Volume(rng.random((8, 8, 8)))
        net = LinearFamily((0.0, 0.0, 0.0))
        assert temporal_smoothness(net, a, b) == 0.0

    def test_linear_family_gives_exact_norm(self):
        rng = np.random.default_rng(7)
        a = Volume(rng.random((8, 8, 8)))
        b = Volume(rng.random((8, 8, 8)))
        p = (3.0, 0.0, 4.0)  # norm 5
        net = LinearFamily(p)
        for dt in (0.25, 0.5):
            assert temporal_smoothness(net, a, b, t_range=(0, 2), dt=dt) == pytest.approx(5.0)

    def test_degenerate_range_rejected(self):
        a = Volume(np.zeros((8, 8, 8)))
        with pytest.raises(ValueError):
            temporal_smoothness(LinearFamily((0, 0, 0)), a, a, t_range=(1.0, 1.0))
