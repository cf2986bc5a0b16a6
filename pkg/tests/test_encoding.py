"""Sparse tri-plane encoding, hashing, and the baseline backends."""

import numpy as np
import pytest

from trislam import _kernels
from trislam.encoding import (AXIS_PAIRS, Bounds, EncodingConfig, PlaneGrid,
                              analytic_param_count, hash2d, hash3d,
                              hash_bucket_load, make_encoding, plane_lookup)


class TestHash:
    def test_zero_input(self):
        assert hash2d(np.array([0, 0]), 18) == 0

    def test_first_coordinate_unscaled(self):
        assert hash2d(np.array([1, 0]), 18) == 1

    def test_second_coordinate_prime(self):
        # 2654435761 mod 2^18
        assert hash2d(np.array([0, 1]), 18) == 227761
        assert 2654435761 % (1 << 18) == 227761

    def test_range(self):
        rng = np.random.default_rng(0)
        xs = rng.integers(0, 2 ** 31, size=(1000, 2))
        for T in (14, 18, 24):
            h = hash2d(xs, T)
            assert h.min() >= 0 and h.max() < (1 << T)

    def test_hash3d_range_and_determinism(self):
        rng = np.random.default_rng(1)
        xs = rng.integers(0, 2 ** 31, size=(1000, 3))
        h1 = hash3d(xs, 16)
        h2 = hash3d(xs, 16)
        np.testing.assert_array_equal(h1, h2)
        assert h1.max() < (1 << 16)

    def test_exponent_bounds(self):
        with pytest.raises(ValueError):
            hash2d(np.array([0, 0]), 13)
        with pytest.raises(ValueError):
            hash2d(np.array([0, 0]), 25)


class TestConfig:
    def test_finest_from_cell_size(self):
        cfg = EncodingConfig()
        # 4 m extent at 2 cm cells
        assert cfg.finest == 200

    def test_resolution_schedule(self):
        cfg = EncodingConfig()
        res = cfg.level_resolutions()
        assert len(res) == 16
        assert res[0] == 16 and res[-1] == 200
        assert all(a < b for a, b in zip(res, res[1:]))

    def test_table_length_capped(self):
        cfg = EncodingConfig(hash_exponent=14)
        enc = make_encoding("sparse_triplane", cfg)
        cap = 1 << 14
        for planes, r in zip(enc.levels, cfg.level_resolutions()):
            for p in planes:
                assert p.table_len == min(r * r, cap)

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            EncodingConfig(hash_exponent=12)
        with pytest.raises(ValueError):
            EncodingConfig(levels=0)
        with pytest.raises(ValueError):
            EncodingConfig(finest_cell_size=0.0)


class TestPlaneLookup:
    def _plane(self, res=6, seed=0):
        rng = np.random.default_rng(seed)
        plane = PlaneGrid(resolution=res, features=2, hash_exponent=14,
                          axis_pair="xy", rng=rng)
        plane.table[:] = rng.normal(size=plane.table.shape)
        return plane

    def test_vertex_returns_stored_feature(self):
        plane = self._plane()
        res = plane.resolution
        p = np.array([[2.0 / (res - 1), 3.0 / (res - 1)]])
        out, _ = plane_lookup(plane, p)
        idx = plane.vertex_index(np.array([2, 3]))
        np.testing.assert_allclose(out[0], plane.table[idx], atol=1e-12)

    def test_cell_center_is_corner_mean(self):
        plane = self._plane()
        res = plane.resolution
        p = np.array([[1.5 / (res - 1), 2.5 / (res - 1)]])
        out, _ = plane_lookup(plane, p)
        corners = np.array([[1, 2], [2, 2], [1, 3], [2, 3]])
        mean = plane.table[plane.vertex_index(corners)].mean(axis=0)
        np.testing.assert_allclose(out[0], mean, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        from trislam.gradcheck import check_plane_lookup

        assert max(check_plane_lookup(s) for s in range(5)) < 1e-4


@pytest.fixture(params=["sparse_triplane", "dense_triplane", "hash_grid_3d"])
def small_encoding(request):
    cfg = EncodingConfig(levels=3, hash_exponent=14, coarsest_resolution=4,
                         finest_resolution=12, seed=7)
    return make_encoding(request.param, cfg)


class TestEncode:
    def test_default_output_dim_is_96(self):
        enc = make_encoding("sparse_triplane", EncodingConfig())
        assert enc.feature_dim == 96

    def test_zero_tables_give_zero_features(self, small_encoding):
        small_encoding.storage.fill(0.0)
        out, _ = small_encoding.encode(np.array([[0.3, -0.2, 0.9]]))
        np.testing.assert_array_equal(out, 0.0)

    def test_bitwise_determinism(self, small_encoding):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-2, 2, size=(64, 3))
        a, _ = small_encoding.encode(pts)
        b, _ = small_encoding.encode(pts)
        np.testing.assert_array_equal(a, b)

    def test_nonfinite_rejected(self, small_encoding):
        with pytest.raises(ValueError):
            small_encoding.encode(np.array([[np.nan, 0, 0]]))

    def test_out_of_bounds_clamps(self, small_encoding):
        far_out, _ = small_encoding.encode(np.array([[5.0, 0.0, 0.0]]))
        boundary, _ = small_encoding.encode(np.array([[2.0, 0.0, 0.0]]))
        np.testing.assert_allclose(far_out, boundary, atol=1e-12)

    def test_continuity_across_cell_boundary(self):
        cfg = EncodingConfig(levels=1, finest_resolution=5, seed=3)
        enc = make_encoding("sparse_triplane", cfg)
        rng = np.random.default_rng(4)
        enc.storage[:] = rng.normal(size=enc.storage.shape)
        # boundary plane of the finest grid: q_x = 1/4 of the unit cube
        x = -2.0 + 4.0 * 0.25
        eps = 1e-12
        lo, _ = enc.encode(np.array([[x - eps, 0.1, 0.2]]))
        hi, _ = enc.encode(np.array([[x + eps, 0.1, 0.2]]))
        np.testing.assert_allclose(lo, hi, atol=1e-9)

    def test_kernel_matches_numpy_path(self, small_encoding, monkeypatch):
        if not _kernels.HAVE_NUMBA:
            pytest.skip("compiled kernels unavailable")
        rng = np.random.default_rng(5)
        small_encoding.storage[:] = rng.normal(size=small_encoding.storage.shape)
        pts = rng.uniform(-2.2, 2.2, size=(128, 3))
        up = rng.normal(size=(128, small_encoding.feature_dim))
        out_k, ctx_k = small_encoding.encode(pts)
        small_encoding.zero_grad()
        dp_k = small_encoding.encode_backward(ctx_k, up)
        grad_k = small_encoding.storage_grad.copy()

        monkeypatch.setattr(_kernels, "HAVE_NUMBA", False)
        out_n, ctx_n = small_encoding.encode(pts)
        small_encoding.zero_grad()
        dp_n = small_encoding.encode_backward(ctx_n, up)
        np.testing.assert_allclose(out_k, out_n, atol=1e-12)
        np.testing.assert_allclose(dp_k, dp_n, atol=1e-10)
        np.testing.assert_allclose(grad_k, small_encoding.storage_grad, atol=1e-10)


class TestEncodeBackward:
    def test_zero_upstream_no_accumulation(self, small_encoding):
        pts = np.array([[0.1, 0.2, 0.3]])
        _, ctx = small_encoding.encode(pts)
        small_encoding.zero_grad()
        small_encoding.encode_backward(ctx, np.zeros((1, small_encoding.feature_dim)))
        assert not small_encoding.storage_grad.any()

    def test_vertex_point_touches_one_entry_per_plane(self):
        cfg = EncodingConfig(levels=1, finest_resolution=5, seed=0)
        enc = make_encoding("sparse_triplane", cfg)
        # q = 0.5 lies on a grid vertex of the 5-resolution level
        pts = np.array([[0.0, 0.0, 0.0]])
        _, ctx = enc.encode(pts)
        up = np.ones((1, enc.feature_dim))
        enc.zero_grad()
        enc.encode_backward(ctx, up)
        touched = np.nonzero(np.any(enc.storage_grad != 0.0, axis=1))[0]
        assert len(touched) == 3  # one vertex in each of the three planes

    def test_mismatched_context_rejected(self, small_encoding):
        other = make_encoding(small_encoding.variant, small_encoding.config)
        _, ctx = other.encode(np.array([[0.0, 0.0, 0.0]]))
        with pytest.raises(ValueError):
            small_encoding.encode_backward(ctx, np.zeros((1, small_encoding.feature_dim)))

    def test_table_gradients_match_finite_differences(self):
        from trislam.gradcheck import check_encoding

        for variant in ("sparse_triplane", "dense_triplane", "hash_grid_3d"):
            assert check_encoding(variant, seed=11) < 1e-5


class TestParamCount:
    def test_dense_512_f32_bytes(self):
        cfg = EncodingConfig(levels=1, finest_resolution=512, features_per_level=32)
        pc = analytic_param_count(cfg, "dense_triplane")
        assert pc.total_bytes == 100_663_296
        assert abs(pc.megabytes - 100.7) < 0.1

    def test_sparse_single_level_r4(self):
        cfg = EncodingConfig(levels=1, finest_resolution=4, features_per_level=2)
        pc = analytic_param_count(cfg, "sparse_triplane")
        assert pc.total_bytes == 384

    def test_ratio_in_expected_band(self):
        sparse = analytic_param_count(EncodingConfig(), "sparse_triplane")
        dense = analytic_param_count(
            EncodingConfig(levels=1, finest_resolution=512, features_per_level=32),
            "dense_triplane")
        assert 0.01 <= sparse.total_bytes / dense.total_bytes <= 0.06

    def test_analytic_matches_instantiated(self):
        cfg = EncodingConfig(levels=3, coarsest_resolution=4, finest_resolution=12)
        for variant in ("sparse_triplane", "dense_triplane", "hash_grid_3d"):
            enc = make_encoding(variant, cfg)
            assert enc.param_count().total_bytes == \
                analytic_param_count(cfg, variant).total_bytes


class TestSaturation:
    def test_saturated_levels_pin_at_capacity(self):
        cfg = EncodingConfig(levels=1, finest_resolution=1024, hash_exponent=18)
        enc = make_encoding("sparse_triplane", cfg)
        assert all(p.table_len == 1 << 18 for p in enc.levels[0])

    def test_bytes_monotone_then_constant(self):
        sizes = []
        for r in (512, 1024, 2048):
            cfg = EncodingConfig(levels=1, finest_resolution=r, hash_exponent=18)
            sizes.append(analytic_param_count(cfg, "sparse_triplane").total_bytes)
        assert sizes[0] <= sizes[1] <= sizes[2]
        assert sizes[1] == sizes[2]  # both saturated at 2^18


class TestAgreementAndLoad:
    def test_sparse_equals_dense_below_capacity(self):
        cfg = EncodingConfig(levels=2, coarsest_resolution=4,
                             finest_resolution=10, seed=9)
        sparse = make_encoding("sparse_triplane", cfg)
        dense = make_encoding("dense_triplane", cfg)
        dense.storage[:] = sparse.storage
        rng = np.random.default_rng(10)
        pts = rng.uniform(-2, 2, size=(50, 3))
        a, _ = sparse.encode(pts)
        b, _ = dense.encode(pts)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_bucket_load_bounded(self):
        assert hash_bucket_load(512, 18) <= 16
