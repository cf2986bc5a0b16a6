"""Serial tracking-then-mapping loop with reprojection-based keyframe
selection and hierarchical bundle adjustment (HBA).

Pose increments are optimized in the tangent space: each Adam step produces
a 6-vector twist that is left-composed onto the pose and then reset to zero,
while the Adam moments persist on the twist coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, SE3Pose, Twist, apply_twist, compose,
                       inverse, pixel_ray_directions, reproject)
from .model import SceneModel
from .nnopt import AdamOptimizer, ParamGroup
from .rendering import (LossWeights, SampleBatch, TruncationConfig,
                        compute_losses, sample_depth_guided, valid_ray_filter)

log = logging.getLogger(__name__)

KEYFRAME_GRID_STRIDE = 8
LOCAL_FLOOR_FRACTION = 0.10


@dataclass(eq=False)
class Keyframe:
    frame_id: int
    frame: object  # RGBDFrame
    pose: SE3Pose
    best_loss: float = np.inf


@dataclass(frozen=True)
class SlamConfig:
    rays_tracking: int = 1024
    rays_mapping: int = 2048
    iters_tracking: int = 10
    iters_mapping: int = 10
    window_size: int = 20
    keyframe_overlap_threshold: float = 0.8
    global_ray_fraction: float = 0.10
    first_frame_iters: int = 500
    lr_pose: float = 0.005
    lr_decoder: float = 0.010
    lr_encoding: float = 0.010
    trunc: TruncationConfig = field(default_factory=TruncationConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    render_mode: str = "normalized"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.global_ray_fraction <= 1:
            raise ValueError("global_ray_fraction must be in [0, 1]")
        if not 0 <= self.keyframe_overlap_threshold <= 1:
            raise ValueError("keyframe_overlap_threshold must be in [0, 1]")
        if self.window_size < 1:
            raise ValueError("window_size must be at least 1")

    @staticmethod
    def noisy_profile(**overrides) -> "SlamConfig":
        """Profile for noisy depth: 128 samples per ray, 15 iterations."""
        base = dict(iters_tracking=15, iters_mapping=15,
                    trunc=TruncationConfig(samples_per_ray=128))
        base.update(overrides)
        return SlamConfig(**base)


@dataclass
class TrackerState:
    """Poses of the two most recent frames, for constant-velocity
    extrapolation."""

    prev: SE3Pose = None
    prev2: SE3Pose = None

    def predict(self) -> SE3Pose:
        if self.prev is None:
            return SE3Pose.identity()
        if self.prev2 is None:
            return self.prev
        return compose(self.prev, compose(inverse(self.prev2), self.prev))

    def push(self, pose: SE3Pose) -> None:
        self.prev2 = self.prev
        self.prev = pose


# -- ray batches ----------------------------------------------------------

def _build_batch(frame, pose: SE3Pose, K: CameraIntrinsics, pix_idx,
                 trunc: TruncationConfig, rng):
    """Sample batch for the given flat pixel indices under the given pose."""
    us = (pix_idx % K.width).astype(np.float64)
    vs = (pix_idx // K.width).astype(np.float64)
    z = frame.depth.ravel()[pix_idx]
    color_gt = frame.rgb.reshape(-1, 3)[pix_idx]
    origins, dirs, z_scale = pixel_ray_directions(us, vs, K, pose)
    valid = valid_ray_filter(z, trunc.far)
    d_ray = np.where(valid, z * z_scale, 0.0)
    t = sample_depth_guided(d_ray, valid, trunc, rng)
    points = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    return SampleBatch(t=t, points=points, color_gt=color_gt,
                       depth_gt=d_ray, valid=valid)


def _evaluate(model: SceneModel, batch: SampleBatch, cfg: SlamConfig,
              with_gradients: bool, accumulate: bool):
    """Query the model on a batch, compute the loss, and optionally
    backpropagate. Returns (LossResult, dpoints or None)."""
    n, m, _ = batch.points.shape
    flat = batch.points.reshape(-1, 3)
    s, c, ctx = model.query(flat)
    batch.sdf = s.reshape(n, m)
    batch.color = c.reshape(n, m, 3)
    loss = compute_losses(batch, cfg.trunc.truncation, cfg.weights,
                          mode=cfg.render_mode, with_gradients=with_gradients)
    if not with_gradients:
        return loss, None
    dpoints = model.backward(ctx, loss.d_sdf.ravel(),
                             loss.d_color.reshape(-1, 3), accumulate=accumulate)
    return loss, dpoints


def _twist_gradient(points, dpoints) -> np.ndarray:
    """Gradient of the loss w.r.t. a left-composed pose twist.

    A world point attached to the camera moves by dp = dt + dtheta x p, so
    the translational gradient is the sum of point gradients and the
    rotational gradient is sum(p x dp).
    """
    p = points.reshape(-1, 3)
    g = dpoints.reshape(-1, 3)
    return np.concatenate([g.sum(axis=0), np.cross(p, g).sum(axis=0)])


def _valid_pixel_indices(frame, K: CameraIntrinsics, far: float):
    return np.flatnonzero(valid_ray_filter(frame.depth.ravel(), far))


def map_param_groups(model: SceneModel, cfg: SlamConfig):
    groups = []
    for name, param, grad, is_table in model.named_arrays():
        lr = cfg.lr_encoding if is_table else cfg.lr_decoder
        groups.append(ParamGroup(name, param, grad, lr, sparse_rows=is_table))
    return groups


# -- initialization -------------------------------------------------------

def init_first_frame(frame, model: SceneModel, cfg: SlamConfig,
                     K: CameraIntrinsics, rng):
    """Optimize the map on frame 0 (identity pose) and register it as the
    first keyframe. Returns (keyframe, per-step loss list)."""
    valid_idx = _valid_pixel_indices(frame, K, cfg.trunc.far)
    if valid_idx.size == 0:
        raise ValueError("first frame has no valid depth")
    pose = SE3Pose.identity()
    opt = AdamOptimizer(map_param_groups(model, cfg))
    losses = []
    for _ in range(cfg.first_frame_iters):
        pix = rng.choice(valid_idx, size=min(cfg.rays_mapping, valid_idx.size),
                         replace=False)
        batch = _build_batch(frame, pose, K, pix, cfg.trunc, rng)
        opt.zero_grad()
        loss, _ = _evaluate(model, batch, cfg, with_gradients=True, accumulate=True)
        opt.step()
        losses.append(loss.total)
    kf = Keyframe(frame_id=0, frame=frame, pose=pose)
    kf.best_loss = min(losses) if losses else np.inf
    return kf, losses


# -- tracking -------------------------------------------------------------

def track_frame(frame, model: SceneModel, state: TrackerState,
                cfg: SlamConfig, K: CameraIntrinsics, rng):
    """Pose-only optimization against the frozen map.

    Returns (pose, info dict). The returned pose is the lowest-loss iterate,
    including the constant-velocity initialization.
    """
    init = state.predict()
    valid_idx = _valid_pixel_indices(frame, K, cfg.trunc.far)
    if valid_idx.size == 0:
        log.warning("track_frame: no valid rays, keeping initialization")
        return init, {"tracked": False, "loss": np.inf}

    twist_vec = np.zeros(6)
    twist_grad = np.zeros(6)
    opt = AdamOptimizer([ParamGroup("pose", twist_vec, twist_grad, cfg.lr_pose)])
    pose = init
    best_pose, best_loss = init, np.inf
    for _ in range(cfg.iters_tracking):
        pix = rng.choice(valid_idx, size=min(cfg.rays_tracking, valid_idx.size),
                         replace=False)
        batch = _build_batch(frame, pose, K, pix, cfg.trunc, rng)
        loss, dpoints = _evaluate(model, batch, cfg, with_gradients=True,
                                  accumulate=False)
        if loss.total < best_loss:
            best_loss, best_pose = loss.total, pose
        twist_grad[:] = _twist_gradient(batch.points, dpoints)
        opt.step()
        pose = apply_twist(Twist.from_vector(twist_vec), pose)
        twist_vec.fill(0.0)
    # score the final iterate too
    pix = rng.choice(valid_idx, size=min(cfg.rays_tracking, valid_idx.size),
                     replace=False)
    batch = _build_batch(frame, pose, K, pix, cfg.trunc, rng)
    loss, _ = _evaluate(model, batch, cfg, with_gradients=False, accumulate=False)
    if loss.total < best_loss:
        best_loss, best_pose = loss.total, pose
    return best_pose, {"tracked": True, "loss": best_loss}


# -- keyframe selection ---------------------------------------------------

def is_keyframe(frame, pose: SE3Pose, ref: Keyframe, K: CameraIntrinsics,
                threshold: float, stride: int = KEYFRAME_GRID_STRIDE):
    """Reproject a stride-sampled pixel grid into the reference keyframe.

    Returns (is_keyframe, overlap ratio): keyframe iff the in-view fraction
    falls below the threshold.
    """
    us, vs = np.meshgrid(np.arange(0, K.width, stride),
                         np.arange(0, K.height, stride))
    us = us.ravel()
    vs = vs.ravel()
    depth = frame.depth[vs, us]
    mask = valid_ray_filter(depth, np.inf)
    if not mask.any():
        log.warning("is_keyframe: no valid-depth pixels, keyframing conservatively")
        return True, 0.0
    _, _, in_view = reproject(us[mask].astype(np.float64),
                              vs[mask].astype(np.float64), depth[mask],
                              K, pose, ref.pose)
    overlap = float(in_view.mean())
    return overlap < threshold, overlap


# -- hierarchical bundle adjustment ---------------------------------------

def allocate_hba_rays(keyframes, window, total_rays: int,
                      global_fraction: float) -> np.ndarray:
    """Per-keyframe ray counts: a global share spread uniformly over all
    keyframes plus a local share over the window weighted by best loss.

    The local weight of each window frame is floored at 10% of a uniform
    share. Counts are integerized with the largest-remainder method and sum
    to total_rays exactly.
    """
    n_kf = len(keyframes)
    if n_kf == 0:
        raise ValueError("allocate_hba_rays requires at least one keyframe")
    counts = np.zeros(n_kf, dtype=np.int64)
    n_global = int(round(global_fraction * total_rays))
    if n_global >= n_kf:
        base, rem = divmod(n_global, n_kf)
        counts += base
        counts[:rem] += 1  # remainder to the oldest keyframes
    elif n_global > 0:
        log.warning("allocate_hba_rays: global budget %d below keyframe count %d, "
                    "stride-sampling", n_global, n_kf)
        sel = np.round(np.linspace(0, n_kf - 1, num=n_global)).astype(int)
        np.add.at(counts, sel, 1)

    n_local = total_rays - int(counts.sum())
    win_idx = [keyframes.index(kf) for kf in window]
    n_win = len(win_idx)
    if n_win == 0 or n_local <= 0:
        return counts

    w = np.array([max(float(kf.best_loss), 0.0) for kf in window])
    finite = np.isfinite(w)
    if not finite.all():
        # frames never mapped yet get the largest observed weight
        w[~finite] = w[finite].max() if finite.any() else 1.0
    if w.sum() <= 0:
        w[:] = 1.0
    shares = w / w.sum()
    floor = LOCAL_FLOOR_FRACTION / n_win
    shares = np.maximum(shares, floor)
    shares /= shares.sum()

    raw = shares * n_local
    base = np.floor(raw).astype(np.int64)
    rem = n_local - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    counts[win_idx] += base
    return counts


class HBA:
    """Joint pose+map optimizer over a sliding keyframe window.

    Window pose twists and all map parameters share one Adam instance; poses
    outside the window and the first keyframe's pose are frozen.
    """

    def __init__(self, model: SceneModel, keyframes, cfg: SlamConfig,
                 K: CameraIntrinsics):
        self.model = model
        self.keyframes = keyframes
        self.cfg = cfg
        self.K = K
        self.window = keyframes[-min(cfg.window_size, len(keyframes)):]
        self.twists = {}
        groups = map_param_groups(model, cfg)
        for kf in self.window:
            if kf.frame_id == keyframes[0].frame_id:
                continue  # gauge fix: first keyframe pose stays put
            vec = np.zeros(6)
            grad = np.zeros(6)
            self.twists[kf.frame_id] = (kf, vec, grad)
            groups.append(ParamGroup(f"pose_{kf.frame_id}", vec, grad, cfg.lr_pose))
        self.opt = AdamOptimizer(groups)

    def step(self, rng) -> dict:
        cfg = self.cfg
        counts = allocate_hba_rays(self.keyframes, self.window,
                                   cfg.rays_mapping, cfg.global_ray_fraction)
        self.opt.zero_grad()
        frame_losses = {}
        for kf, count in zip(self.keyframes, counts):
            if count == 0:
                continue
            valid_idx = _valid_pixel_indices(kf.frame, self.K, cfg.trunc.far)
            if valid_idx.size == 0:
                continue
            pix = rng.choice(valid_idx, size=min(int(count), valid_idx.size),
                             replace=False)
            batch = _build_batch(kf.frame, kf.pose, self.K, pix, cfg.trunc, rng)
            loss, dpoints = _evaluate(self.model, batch, cfg,
                                      with_gradients=True, accumulate=True)
            frame_losses[kf.frame_id] = loss.total
            if kf.frame_id in self.twists:
                self.twists[kf.frame_id][2][:] += _twist_gradient(batch.points, dpoints)
            if loss.total < kf.best_loss:
                kf.best_loss = loss.total
        self.opt.step()
        for kf, vec, grad in self.twists.values():
            kf.pose = apply_twist(Twist.from_vector(vec), kf.pose)
            vec.fill(0.0)
        return {"allocation": counts.tolist(), "frame_losses": frame_losses}


def run_hba(model, keyframes, cfg, K, rng, n_steps: int):
    hba = HBA(model, keyframes, cfg, K)
    return [hba.step(rng) for _ in range(n_steps)]


# -- full loop ------------------------------------------------------------

@dataclass
class SlamResult:
    poses: list
    keyframes: list
    model: SceneModel
    diagnostics: list


def run(dataset, cfg: SlamConfig, K: CameraIntrinsics = None,
        enc_config=None, variant: str = "sparse_triplane") -> SlamResult:
    """Track every frame serially, map on keyframes, return the trajectory.

    A frame that raises during tracking is recorded in the diagnostics and
    skipped; its pose falls back to the constant-velocity prediction.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    K = K or dataset.intrinsics
    if enc_config is None:
        from .encoding import EncodingConfig
        enc_config = EncodingConfig(seed=cfg.seed)
    model = SceneModel(enc_config, variant=variant, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    kf0, init_losses = init_first_frame(dataset[0], model, cfg, K, rng)
    keyframes = [kf0]
    poses = [kf0.pose]
    state = TrackerState()
    state.push(kf0.pose)
    diagnostics = [{
        "frame": 0, "keyframe": True, "overlap": 1.0,
        "loss": init_losses[-1] if init_losses else None,
        "init_loss_first": init_losses[0] if init_losses else None,
    }]

    for i in range(1, len(dataset)):
        frame = dataset[i]
        record = {"frame": i, "keyframe": False}
        try:
            pose, info = track_frame(frame, model, state, cfg, K, rng)
            record["loss"] = info["loss"]
            record["tracked"] = info["tracked"]
            make_kf, overlap = is_keyframe(frame, pose, keyframes[-1], K,
                                           cfg.keyframe_overlap_threshold)
            record["overlap"] = overlap
            if make_kf:
                kf = Keyframe(frame_id=i, frame=frame, pose=pose)
                keyframes.append(kf)
                record["keyframe"] = True
                hba_logs = run_hba(model, keyframes, cfg, K, rng,
                                   cfg.iters_mapping)
                record["allocation"] = hba_logs[-1]["allocation"]
                pose = kf.pose  # may have moved during mapping
        except Exception as e:
            log.warning("frame %d failed (%s), skipping", i, e)
            record["error"] = str(e)
            pose = state.predict()
        poses.append(pose)
        state.push(pose)
        diagnostics.append(record)
    return SlamResult(poses=poses, keyframes=keyframes, model=model,
                      diagnostics=diagnostics)
