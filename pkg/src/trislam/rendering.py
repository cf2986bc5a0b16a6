"""Depth-guided ray sampling, SDF-weighted rendering, and the 4-term loss.

All functions are batched over rays: depths t have shape (N, M), predicted
SDF s is (N, M), predicted color c is (N, M, 3). Depth values here are
distances along the (unit-length) ray, not z-depths; callers convert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import sigmoid

SUM_WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class TruncationConfig:
    truncation: float = 0.10  # meters
    near: float = 0.01
    far: float = 8.0
    samples_per_ray: int = 64

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        if self.samples_per_ray < 3:
            raise ValueError("samples_per_ray must be at least 3")


@dataclass(frozen=True)
class LossWeights:
    color: float = 5.0
    depth: float = 1.0
    sdf: float = 10000.0
    free_space: float = 10.0

    def __post_init__(self):
        if min(self.color, self.depth, self.sdf, self.free_space) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SampleBatch:
    """Per-ray samples plus ground truth; the unit rendering/loss work on."""

    t: np.ndarray  # (N, M) sorted ray distances
    points: np.ndarray  # (N, M, 3) world positions
    sdf: np.ndarray = None  # (N, M) predicted
    color: np.ndarray = None  # (N, M, 3) predicted, channels in (0, 1)
    color_gt: np.ndarray = None  # (N, 3)
    depth_gt: np.ndarray = None  # (N,) ray-distance ground truth
    valid: np.ndarray = None  # (N,) depth-validity mask


def valid_ray_filter(depths, max_depth: float) -> np.ndarray:
    """True where depth is finite, strictly positive, and at most max_depth."""
    if max_depth <= 0:
        raise ValueError("max_depth must be positive")
    depths = np.asarray(depths, dtype=np.float64)
    return np.isfinite(depths) & (depths > 0) & (depths <= max_depth)


def sample_depth_guided(depth_gt, valid, cfg: TruncationConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Stratified depth samples, sorted ascending; shape (N, M).

    Valid rays get floor(2M/3) samples near the observed surface in
    [d - 1.2*tr, d + 1.2*tr] (clamped to [near, far]) and the remainder
    across [near, far]. Invalid rays get all M samples across [near, far].
    """
    depth_gt = np.atleast_1d(np.asarray(depth_gt, dtype=np.float64))
    valid = np.atleast_1d(np.asarray(valid, dtype=bool))
    n = depth_gt.shape[0]
    M = cfg.samples_per_ray
    n_near = (2 * M) // 3
    n_far = M - n_near

    def stratified(lo, hi, count):
        u = (np.arange(count) + rng.random((n, count))) / count
        return lo[:, None] + u * (hi - lo)[:, None]

    band = 1.2 * cfg.truncation
    lo_near = np.clip(depth_gt - band, cfg.near, cfg.far)
    hi_near = np.clip(depth_gt + band, cfg.near, cfg.far)
    near_lo = np.full(n, cfg.near)
    far_hi = np.full(n, cfg.far)

    t_near = stratified(lo_near, hi_near, n_near)
    t_far = stratified(near_lo, far_hi, n_far)
    t_valid = np.concatenate([t_near, t_far], axis=1)
    t_invalid = stratified(near_lo, far_hi, M)

    t = np.where(valid[:, None], t_valid, t_invalid)
    t.sort(axis=1)
    return t


def render_weights(s: np.ndarray, tr: float) -> np.ndarray:
    """w = sigmoid(-s/tr) * sigmoid(s/tr); symmetric, peak 0.25 at s = 0."""
    a = sigmoid(np.asarray(s, dtype=np.float64) / tr)
    return a * (1.0 - a)


@dataclass
class RenderResult:
    color: np.ndarray  # (N, 3)
    depth: np.ndarray  # (N,)
    weights: np.ndarray  # (N, M)
    _sig: np.ndarray = field(repr=False, default=None)
    _wsum: np.ndarray = field(repr=False, default=None)
    _mode: str = "mean"


def render_rays(t, s, c, tr: float, mode: str = "mean") -> RenderResult:
    """Blend per-sample color/depth with SDF-derived weights.

    mode "mean" divides by the sample count M; mode "normalized" divides by
    the weight sum (floored at 1e-8).
    """
    if mode not in ("mean", "normalized"):
        raise ValueError(f"unknown rendering mode {mode!r}")
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("render_rays requires finite SDF predictions")
    a = sigmoid(s / tr)
    w = a * (1.0 - a)
    if mode == "mean":
        denom = np.full(t.shape[0], float(t.shape[1]))
    else:
        denom = np.maximum(w.sum(axis=1), SUM_WEIGHT_FLOOR)
    color = np.einsum("nm,nmc->nc", w, c) / denom[:, None]
    depth = (w * t).sum(axis=1) / denom
    return RenderResult(color=color, depth=depth, weights=w, _sig=a,
                        _wsum=w.sum(axis=1), _mode=mode)


def render_backward(res: RenderResult, t, c, tr: float,
                    d_color: np.ndarray, d_depth: np.ndarray):
    """Gradients of a scalar loss through render_rays.

    Given dL/dC (N, 3) and dL/dD (N,), returns (dL/ds (N, M), dL/dc (N, M, 3)).
    """
    t = np.asarray(t, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    w = res.weights
    if res._mode == "mean":
        denom = np.full(t.shape[0], float(t.shape[1]))
        d_denom_dw = np.zeros(t.shape[0])
    else:
        wsum = res._wsum
        denom = np.maximum(wsum, SUM_WEIGHT_FLOOR)
        d_denom_dw = (wsum > SUM_WEIGHT_FLOOR).astype(np.float64)

    dc = w[:, :, None] * d_color[:, None, :] / denom[:, None, None]
    # dC/dw_i = (c_i - C * d_denom/dw_i) / denom; same structure for depth
    numer = np.einsum("nmc,nc->nm", c, d_color) + t * d_depth[:, None]
    pulled = np.einsum("nc,nc->n", res.color, d_color) + res.depth * d_depth
    dL_dw = (numer - (pulled * d_denom_dw)[:, None]) / denom[:, None]
    a = res._sig
    dw_ds = a * (1.0 - a) * (1.0 - 2.0 * a) / tr
    ds = dL_dw * dw_ds
    return ds, dc


@dataclass
class LossResult:
    total: float
    color: float
    depth: float
    sdf: float
    free_space: float
    d_sdf: np.ndarray = None  # (N, M) gradient of total w.r.t. s
    d_color: np.ndarray = None  # (N, M, 3) gradient of total w.r.t. c

    def components(self) -> dict:
        return {
            "color": self.color,
            "depth": self.depth,
            "sdf": self.sdf,
            "free_space": self.free_space,
        }


def compute_losses(batch: SampleBatch, tr: float, weights: LossWeights,
                   mode: str = "normalized",
                   with_gradients: bool = True) -> LossResult:
    """Four-term loss: color MSE over all rays, depth MSE over valid rays,
    SDF and free-space terms with per-ray then across-ray averaging.

    Rays with an empty truncation (or free-space) sample set are excluded
    from that term's ray average.
    """
    t = np.asarray(batch.t, dtype=np.float64)
    s = np.asarray(batch.sdf, dtype=np.float64)
    c = np.asarray(batch.color, dtype=np.float64)
    color_gt = np.asarray(batch.color_gt, dtype=np.float64)
    depth_gt = np.asarray(batch.depth_gt, dtype=np.float64)
    valid = np.asarray(batch.valid, dtype=bool)
    n, m = s.shape

    res = render_rays(t, s, c, tr, mode=mode)

    # color: mean squared error over every sampled ray (all channels)
    c_err = res.color - color_gt
    loss_c = float((c_err ** 2).mean()) if n else 0.0

    n_valid = int(valid.sum())
    d_err = np.where(valid, res.depth - depth_gt, 0.0)
    loss_d = float((d_err ** 2).sum() / n_valid) if n_valid else 0.0

    diff = depth_gt[:, None] - t  # (N, M)
    band = valid[:, None] & (np.abs(diff) <= tr)
    free = valid[:, None] & (diff > tr)

    def nested_mean(mask, err_sq):
        counts = mask.sum(axis=1)
        rays = counts > 0
        n_rays = int(rays.sum())
        if n_rays == 0:
            return 0.0, counts, rays, 0
        per_ray = np.where(rays, (err_sq * mask).sum(axis=1) / np.maximum(counts, 1), 0.0)
        return float(per_ray.sum() / n_rays), counts, rays, n_rays

    sdf_err = s - diff
    loss_sdf, band_counts, band_rays, n_band_rays = nested_mean(band, sdf_err ** 2)
    fs_err = s - tr
    loss_fs, free_counts, free_rays, n_free_rays = nested_mean(free, fs_err ** 2)

    total = (
        weights.color * loss_c
        + weights.depth * loss_d
        + weights.sdf * loss_sdf
        + weights.free_space * loss_fs
    )
    result = LossResult(total=float(total), color=loss_c, depth=loss_d,
                        sdf=loss_sdf, free_space=loss_fs)
    if not with_gradients:
        return result

    dL_dC = weights.color * 2.0 * c_err / c_err.size if n else np.zeros_like(c_err)
    dL_dD = (weights.depth * 2.0 * d_err / n_valid) if n_valid else np.zeros(n)
    ds, dc = render_backward(res, t, c, tr, dL_dC, dL_dD)

    if n_band_rays:
        scale = weights.sdf * 2.0 / n_band_rays
        ds += np.where(band, scale * sdf_err / np.maximum(band_counts, 1)[:, None], 0.0)
    if n_free_rays:
        scale = weights.free_space * 2.0 / n_free_rays
        ds += np.where(free, scale * fs_err / np.maximum(free_counts, 1)[:, None], 0.0)

    result.d_sdf = ds
    result.d_color = dc
    return result
