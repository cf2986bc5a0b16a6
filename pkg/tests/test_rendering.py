"""Depth-guided sampling, SDF-weighted rendering, and the four-term loss."""

import numpy as np
import pytest

from trislam.nnopt import finite_difference_check
from trislam.rendering import (LossWeights, SampleBatch, TruncationConfig,
                               compute_losses, render_rays, render_weights,
                               sample_depth_guided, valid_ray_filter)

TR = 0.10


class TestSampler:
    def test_split_counts_and_ranges(self):
        cfg = TruncationConfig(truncation=TR, near=0.01, far=8.0, samples_per_ray=64)
        rng = np.random.default_rng(0)
        t = sample_depth_guided([2.0], [True], cfg, rng)[0]
        assert t.shape == (64,)
        assert np.all(np.diff(t) >= 0)
        in_band = (t >= 1.88 - 1e-12) & (t <= 2.12 + 1e-12)
        assert in_band.sum() >= 42  # 42 drawn in the band, far draws may land there too
        assert t.min() >= 0.01 and t.max() <= 8.0

    def test_invalid_ray_spans_full_range(self):
        cfg = TruncationConfig(samples_per_ray=64)
        rng = np.random.default_rng(1)
        t = sample_depth_guided([0.0], [False], cfg, rng)[0]
        assert t.min() < 1.0 and t.max() > 6.0
        assert t.shape == (64,)

    def test_seed_determinism(self):
        cfg = TruncationConfig(samples_per_ray=32)
        a = sample_depth_guided([1.5, 0.0], [True, False], cfg,
                                np.random.default_rng(7))
        b = sample_depth_guided([1.5, 0.0], [True, False], cfg,
                                np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_band_clamped_to_near_far(self):
        cfg = TruncationConfig(truncation=TR, near=0.5, far=2.0, samples_per_ray=30)
        t = sample_depth_guided([0.5], [True], cfg, np.random.default_rng(2))
        assert t.min() >= 0.5 and t.max() <= 2.0


class TestWeights:
    def test_symmetric_peak_quarter(self):
        s = np.linspace(-1, 1, 201)
        w = render_weights(s, TR)
        np.testing.assert_allclose(w, w[::-1], atol=1e-12)
        assert abs(w.max() - 0.25) < 1e-12
        assert abs(w[100] - 0.25) < 1e-12  # s = 0

    def test_strictly_decreasing_in_magnitude(self):
        s = np.linspace(0, 1, 100)
        w = render_weights(s, TR)
        assert np.all(np.diff(w) < 0)


class TestRender:
    def test_normalized_constant_color(self):
        rng = np.random.default_rng(3)
        t = np.sort(rng.uniform(0.1, 4.0, size=(4, 16)), axis=1)
        s = rng.normal(size=(4, 16), scale=0.05)
        c = np.broadcast_to(np.array([0.2, 0.5, 0.7]), (4, 16, 3))
        res = render_rays(t, s, c, TR, mode="normalized")
        np.testing.assert_allclose(res.color, [[0.2, 0.5, 0.7]] * 4, atol=1e-6)

    def test_mean_mode_zero_sdf_quarter_color(self):
        t = np.linspace(0.1, 2.0, 8)[None, :]
        s = np.zeros((1, 8))
        c = np.full((1, 8, 3), 0.8)
        res = render_rays(t, s, c, TR, mode="mean")
        np.testing.assert_allclose(res.color, 0.25 * 0.8, atol=0)

    def test_far_sdf_weights_vanish_mean_mode(self):
        t = np.linspace(0.1, 2.0, 8)[None, :]
        s = np.full((1, 8), 10 * TR)
        c = np.ones((1, 8, 3))
        res = render_rays(t, s, c, TR, mode="mean")
        assert np.abs(res.color).max() < 1e-3
        assert abs(res.depth[0]) < 1e-2

    def test_normalized_equal_depth_exact(self):
        t = np.full((1, 8), 1.37)
        s = np.random.default_rng(4).normal(size=(1, 8))
        c = np.zeros((1, 8, 3))
        res = render_rays(t, s, c, TR, mode="normalized")
        np.testing.assert_allclose(res.depth, 1.37, atol=1e-12)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            render_rays(np.ones((1, 4)), np.ones((1, 4)), np.ones((1, 4, 3)),
                        TR, mode="other")

    def test_nonfinite_sdf_rejected(self):
        s = np.ones((1, 4))
        s[0, 0] = np.nan
        with pytest.raises(ValueError):
            render_rays(np.ones((1, 4)), s, np.ones((1, 4, 3)), TR)


class TestValidRayFilter:
    def test_zero_depth_invalid(self):
        assert not valid_ray_filter([0.0], 8.0)[0]

    def test_max_depth_boundary_inclusive(self):
        assert valid_ray_filter([8.0], 8.0)[0]
        assert not valid_ray_filter([8.0 + 1e-9], 8.0)[0]

    def test_infinite_invalid(self):
        assert not valid_ray_filter([np.inf], 8.0)[0]
        assert not valid_ray_filter([np.nan], 8.0)[0]


def perfect_batch():
    """A batch whose predictions match every loss target exactly."""
    d = 1.5
    t = np.full((1, 6), d)
    c_gt = np.array([[0.3, 0.6, 0.2]])
    batch = SampleBatch(
        t=t,
        points=np.zeros((1, 6, 3)),
        sdf=d - t,  # zero on the band
        color=np.broadcast_to(c_gt, (1, 6, 3)).copy(),
        color_gt=c_gt,
        depth_gt=np.array([d]),
        valid=np.array([True]),
    )
    return batch


class TestLosses:
    def test_exact_targets_zero_loss(self):
        res = compute_losses(perfect_batch(), TR, LossWeights(), mode="normalized")
        assert res.total < 1e-30
        assert max(res.color, res.depth, res.sdf, res.free_space) < 1e-30

    def test_single_band_residual_hand_value(self):
        d = 2.0
        t = np.array([[0.5, 1.95, 3.5]])  # one free-space, one in-band, one behind
        s = np.array([[TR, (d - 1.95) + 0.01, -0.5]])
        batch = SampleBatch(t=t, points=np.zeros((1, 3, 3)), sdf=s,
                            color=np.full((1, 3, 3), 0.5),
                            color_gt=np.array([[0.5, 0.5, 0.5]]),
                            depth_gt=np.array([d]), valid=np.array([True]))
        w = LossWeights(color=0.0, depth=0.0)
        res = compute_losses(batch, TR, w, mode="normalized")
        np.testing.assert_allclose(res.sdf, 1e-4, atol=1e-16)
        np.testing.assert_allclose(w.sdf * res.sdf, 1.0, atol=1e-10)
        assert res.free_space == 0.0

    def test_doubling_weights_doubles_total(self):
        rng = np.random.default_rng(5)
        t = np.sort(rng.uniform(0.1, 4.0, size=(3, 8)), axis=1)
        batch = SampleBatch(t=t, points=np.zeros((3, 8, 3)),
                            sdf=rng.normal(size=(3, 8), scale=0.05),
                            color=rng.uniform(0.2, 0.8, size=(3, 8, 3)),
                            color_gt=rng.uniform(size=(3, 3)),
                            depth_gt=np.array([1.0, 2.0, 0.0]),
                            valid=np.array([True, True, False]))
        w1 = LossWeights()
        w2 = LossWeights(color=10.0, depth=2.0, sdf=20000.0, free_space=20.0)
        r1 = compute_losses(batch, TR, w1, with_gradients=False)
        r2 = compute_losses(batch, TR, w2, with_gradients=False)
        np.testing.assert_allclose(r2.total, 2 * r1.total, rtol=1e-12)
        assert r1.color == r2.color and r1.sdf == r2.sdf

    def test_all_components_non_negative(self):
        rng = np.random.default_rng(6)
        t = np.sort(rng.uniform(0.1, 4.0, size=(5, 12)), axis=1)
        batch = SampleBatch(t=t, points=np.zeros((5, 12, 3)),
                            sdf=rng.normal(size=(5, 12)),
                            color=rng.uniform(size=(5, 12, 3)),
                            color_gt=rng.uniform(size=(5, 3)),
                            depth_gt=rng.uniform(0.5, 3.0, size=5),
                            valid=rng.random(5) > 0.3)
        res = compute_losses(batch, TR, LossWeights(), with_gradients=False)
        assert min(res.color, res.depth, res.sdf, res.free_space) >= 0.0

    @pytest.mark.parametrize("mode", ["mean", "normalized"])
    def test_gradients_match_finite_differences(self, mode):
        rng = np.random.default_rng(7)
        n, m = 3, 6
        t = np.sort(rng.uniform(0.3, 3.0, size=(n, m)), axis=1)
        depth_gt = rng.uniform(0.8, 2.0, size=n)
        # keep samples away from the band edges so masks are FD-stable
        for i in range(n):
            edge = np.abs(np.abs(depth_gt[i] - t[i]) - TR)
            t[i, edge < 5e-3] += 0.01
        s0 = rng.normal(size=(n, m), scale=0.05)
        c0 = rng.uniform(0.2, 0.8, size=(n, m, 3))
        batch = SampleBatch(t=t, points=np.zeros((n, m, 3)), sdf=s0, color=c0,
                            color_gt=rng.uniform(size=(n, 3)),
                            depth_gt=depth_gt,
                            valid=np.array([True, True, False]))
        res = compute_losses(batch, TR, LossWeights(), mode=mode)

        def loss_s(flat):
            batch.sdf = flat.reshape(n, m)
            out = compute_losses(batch, TR, LossWeights(), mode=mode,
                                 with_gradients=False).total
            batch.sdf = s0
            return out

        rel, _ = finite_difference_check(loss_s, s0.ravel(), res.d_sdf.ravel(),
                                         h=1e-6)
        assert rel < 1e-4

        def loss_c(flat):
            batch.color = flat.reshape(n, m, 3)
            out = compute_losses(batch, TR, LossWeights(), mode=mode,
                                 with_gradients=False).total
            batch.color = c0
            return out

        # larger step for color: its contribution to the total is small next to
        # the heavily weighted sdf term, so 1e-6 differences hit cancellation
        rel, _ = finite_difference_check(loss_c, c0.ravel(), res.d_color.ravel(),
                                         h=1e-5)
        assert rel < 1e-4
