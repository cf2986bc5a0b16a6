"""Finite-difference gradient suites for every hand-derived backward pass.

Each suite runs many independently seeded small cases. Cases are resampled
away from piecewise-linear kinks (interpolation cell boundaries, ReLU zero
crossings) so the central difference measures the true derivative.
"""

from __future__ import annotations

import numpy as np

from .decoder import MLPDecoder
from .encoding import (Bounds, EncodingConfig, PlaneGrid, _plane_position_grad,
                       _scatter_plane_grad, make_encoding, plane_lookup)
from .geometry import SE3Pose, Twist, apply_twist, se3_exp
from .model import SceneModel
from .nnopt import finite_difference_check
from .rendering import LossWeights, SampleBatch, compute_losses
from .slam import _twist_gradient

FD_STEP = 1e-4
TOLERANCE = 1e-4
SMALL_ENC = dict(levels=3, hash_exponent=14, features_per_level=2,
                 coarsest_resolution=4, finest_resolution=12)


def _safe_unit_points(rng, n, dim, resolutions, h, margin: float = 20.0):
    """Points in (0,1)^dim whose interpolation cells stay fixed under a +-h
    probe at every resolution."""
    out = np.empty((n, dim))
    for i in range(n):
        for _ in range(1000):
            p = rng.uniform(0.05, 0.95, size=dim)
            ok = True
            for res in resolutions:
                x = p * (res - 1)
                frac = x - np.floor(x)
                if np.any(frac < margin * h * (res - 1)) or np.any(
                        frac > 1 - margin * h * (res - 1)):
                    ok = False
                    break
            if ok:
                out[i] = p
                break
        else:
            raise RuntimeError("could not sample a kink-free point")
    return out


def check_plane_lookup(seed: int, n_points: int = 5) -> float:
    """FD-check both outputs of one plane lookup: position gradient and
    scattered table gradient."""
    rng = np.random.default_rng(seed)
    plane = PlaneGrid(resolution=8, features=2, hash_exponent=14,
                      axis_pair="xy", rng=rng)
    plane.table[:] = rng.normal(size=plane.table.shape)
    p = _safe_unit_points(rng, n_points, 2, [plane.resolution], FD_STEP)
    u = rng.normal(size=(n_points, plane.features))

    _, ctx = plane_lookup(plane, p)
    da, db = _plane_position_grad(ctx, u)
    grad_p = np.stack([da, db], axis=-1)

    def loss_pos(flat):
        feats, _ = plane_lookup(plane, flat.reshape(n_points, 2))
        return float((feats * u).sum())

    rel_pos, _ = finite_difference_check(loss_pos, p.ravel(), grad_p.ravel(), h=FD_STEP)

    plane.grad.fill(0.0)
    _scatter_plane_grad(plane, ctx, u)

    def loss_tab(flat):
        saved = plane.table.copy()
        plane.table[:] = flat.reshape(plane.table.shape)
        feats, _ = plane_lookup(plane, p)
        plane.table[:] = saved
        return float((feats * u).sum())

    rel_tab, _ = finite_difference_check(loss_tab, plane.table.ravel(),
                                         plane.grad.ravel(), h=FD_STEP,
                                         n_samples=24, rng=rng)
    return max(rel_pos, rel_tab)


def check_encoding(variant: str, seed: int, n_points: int = 4) -> float:
    """FD-check encode_backward: position gradient and table gradient."""
    rng = np.random.default_rng(seed)
    cfg = EncodingConfig(seed=seed, **SMALL_ENC)
    enc = make_encoding(variant, cfg)
    enc.storage[:] = rng.normal(size=enc.storage.shape)
    b = cfg.scene_bounds
    q = _safe_unit_points(rng, n_points, 3, cfg.level_resolutions(), FD_STEP / b.max_extent)
    points = b.lo + q * b.max_extent
    u = rng.normal(size=(n_points, enc.feature_dim))

    _, ctx = enc.encode(points)
    enc.zero_grad()
    dp = enc.encode_backward(ctx, u, accumulate=True)

    def loss_pos(flat):
        feats, _ = enc.encode(flat.reshape(n_points, 3))
        return float((feats * u).sum())

    rel_pos, _ = finite_difference_check(loss_pos, points.ravel(), dp.ravel(), h=FD_STEP)

    table_grad = enc.storage_grad.copy()

    def loss_tab(flat):
        saved = enc.storage.copy()
        enc.storage[:] = flat.reshape(enc.storage.shape)
        feats, _ = enc.encode(points)
        enc.storage[:] = saved
        return float((feats * u).sum())

    rel_tab, _ = finite_difference_check(loss_tab, enc.storage.ravel(),
                                         table_grad.ravel(), h=FD_STEP,
                                         n_samples=24, rng=rng)
    return max(rel_pos, rel_tab)


def _decoder_case(kind: str, seed: int, n: int = 5):
    """A decoder input whose ReLU pre-activations stay clear of zero."""
    rng = np.random.default_rng(seed)
    in_dim = 8
    dec = MLPDecoder.sdf(in_dim, seed=seed) if kind == "sdf" else \
        MLPDecoder.color(in_dim, seed=seed)
    for _ in range(200):
        x = rng.normal(size=(n, in_dim))
        _, cache = dec.forward(x)
        if min(np.abs(cache.pre1).min(), np.abs(cache.pre2).min()) > 1e-2:
            return dec, x
    raise RuntimeError("could not sample a kink-free decoder input")


def check_decoder(kind: str, seed: int) -> float:
    dec, x = _decoder_case(kind, seed)
    rng = np.random.default_rng(seed + 1)
    out, cache = dec.forward(x)
    u = rng.normal(size=out.shape)
    dec.zero_grad()
    d_x = dec.backward(cache, u, accumulate=True)

    def loss_x(flat):
        o, _ = dec.forward(flat.reshape(x.shape))
        return float((o * u).sum())

    rel_x, _ = finite_difference_check(loss_x, x.ravel(), d_x.ravel(), h=FD_STEP)

    worst = rel_x
    for name, p, g in dec.named_params():
        def loss_p(flat, p=p):
            saved = p.copy()
            p[:] = flat.reshape(p.shape)
            o, _ = dec.forward(x)
            p[:] = saved
            return float((o * u).sum())

        rel, _ = finite_difference_check(loss_p, p.ravel(), g.ravel(),
                                         h=FD_STEP, n_samples=8, rng=rng)
        worst = max(worst, rel)
    return worst


def check_pose_twist(seed: int, n_rays: int = 3, m: int = 8) -> float:
    """FD-check the full loss gradient w.r.t. a left-composed pose twist."""
    rng = np.random.default_rng(seed)
    cfg = EncodingConfig(seed=seed, **SMALL_ENC)
    model = SceneModel(cfg, seed=seed)
    for _, param, _, _ in model.named_arrays():
        param += 0.05 * rng.normal(size=param.shape)

    pose = se3_exp(Twist(rotational=0.1 * rng.normal(size=3),
                         translational=0.2 * rng.normal(size=3)))
    dirs_cam = rng.normal(size=(n_rays, 3))
    dirs_cam[:, 2] = np.abs(dirs_cam[:, 2]) + 1.0
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    t = np.sort(rng.uniform(0.3, 1.5, size=(n_rays, m)), axis=1)
    depth_gt = rng.uniform(0.6, 1.2, size=n_rays)
    color_gt = rng.uniform(0.2, 0.8, size=(n_rays, 3))
    valid = np.ones(n_rays, dtype=bool)
    weights = LossWeights()
    tr = 0.10

    def batch_for(p: SE3Pose):
        origins = np.broadcast_to(p.translation, (n_rays, 3))
        dirs = dirs_cam @ p.rotation.T
        points = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
        return SampleBatch(t=t, points=points, color_gt=color_gt,
                           depth_gt=depth_gt, valid=valid)

    def eval_loss(p: SE3Pose, with_gradients: bool):
        batch = batch_for(p)
        s, c, ctx = model.query(batch.points.reshape(-1, 3))
        batch.sdf = s.reshape(n_rays, m)
        batch.color = c.reshape(n_rays, m, 3)
        loss = compute_losses(batch, tr, weights, with_gradients=with_gradients)
        if not with_gradients:
            return loss, None
        dpoints = model.backward(ctx, loss.d_sdf.ravel(),
                                 loss.d_color.reshape(-1, 3), accumulate=False)
        return loss, _twist_gradient(batch.points, dpoints)

    _, grad = eval_loss(pose, True)

    def loss_tw(tw):
        p = apply_twist(Twist.from_vector(tw), pose)
        loss, _ = eval_loss(p, False)
        return loss.total

    # smaller step: the heavily weighted SDF term gives the loss high
    # curvature, so h=1e-4 leaves visible truncation error
    rel, _ = finite_difference_check(loss_tw, np.zeros(6), grad, h=1e-5)
    return rel


SUITES = {
    "plane_lookup": check_plane_lookup,
    "encode_sparse_triplane": lambda seed: check_encoding("sparse_triplane", seed),
    "encode_dense_triplane": lambda seed: check_encoding("dense_triplane", seed),
    "encode_hash_grid_3d": lambda seed: check_encoding("hash_grid_3d", seed),
    "decoder_sdf": lambda seed: check_decoder("sdf", seed),
    "decoder_color": lambda seed: check_decoder("color", seed),
    "pose_twist": check_pose_twist,
}


def run_all(n_cases: int = 100, base_seed: int = 0,
            tolerance: float = TOLERANCE) -> dict:
    """Run every suite; returns {name: (max relative error, passed)}."""
    results = {}
    for name, fn in SUITES.items():
        worst = 0.0
        for k in range(n_cases):
            worst = max(worst, fn(base_seed + k))
        results[name] = (worst, worst < tolerance)
    return results
