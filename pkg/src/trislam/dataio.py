"""Dataset ingestion (TUM layout), synthetic RGB-D generation from analytic
SDF scenes, trajectory text IO, and the run configuration schema.

Quaternions are w-first internally and w-last on disk (TUM convention).
Depth images on disk are 16-bit PNGs divided by depth_scale to meters;
depth 0 marks an invalid measurement.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .encoding import Bounds
from .geometry import CameraIntrinsics, SE3Pose, pixel_ray_directions

log = logging.getLogger(__name__)

ASSOCIATION_WINDOW = 0.02  # seconds, TUM community convention
QUAT_NORM_WARN = 1e-3


# -- quaternions (w-first internally) ------------------------------------

def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R) -> np.ndarray:
    """Rotation matrix to w-first unit quaternion (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# -- frames and datasets --------------------------------------------------

@dataclass
class RGBDFrame:
    timestamp: float
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    gt_pose: SE3Pose | None = None

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth dimensions differ")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")


@dataclass
class RGBDDataset:
    frames: list
    intrinsics: CameraIntrinsics

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def gt_trajectory(self):
        return [f.gt_pose for f in self.frames]


# -- TUM format -----------------------------------------------------------

def _read_tum_index(path):
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            records.append((float(parts[0]), parts[1:]))
    return records


def _associate(a_times, b_times, window):
    """Greedy nearest-timestamp matching; returns index pairs."""
    pairs = []
    used = set()
    b = np.asarray(b_times)
    for i, t in enumerate(a_times):
        j = int(np.argmin(np.abs(b - t)))
        if abs(b[j] - t) <= window and j not in used:
            pairs.append((i, j))
            used.add(j)
    return pairs


def load_tum(directory, intrinsics: CameraIntrinsics,
             association_window: float = ASSOCIATION_WINDOW,
             max_frames: int | None = None) -> RGBDDataset:
    """Load a TUM-layout RGB-D directory (rgb.txt / depth.txt /
    optional groundtruth.txt)."""
    for name in ("rgb.txt", "depth.txt"):
        if not os.path.isfile(os.path.join(directory, name)):
            raise FileNotFoundError(f"missing index file: {os.path.join(directory, name)}")
    rgb_idx = _read_tum_index(os.path.join(directory, "rgb.txt"))
    depth_idx = _read_tum_index(os.path.join(directory, "depth.txt"))

    gt = None
    gt_path = os.path.join(directory, "groundtruth.txt")
    if os.path.isfile(gt_path):
        gt = _read_tum_index(gt_path)
        gt_times = np.array([t for t, _ in gt])

    pairs = _associate([t for t, _ in rgb_idx], [t for t, _ in depth_idx],
                       association_window)
    dropped = len(rgb_idx) - len(pairs)
    if dropped:
        log.info("load_tum: dropped %d rgb records without a depth match", dropped)

    frames = []
    for i, j in pairs:
        if max_frames is not None and len(frames) >= max_frames:
            break
        t_rgb, rgb_rec = rgb_idx[i]
        _, depth_rec = depth_idx[j]
        try:
            rgb = np.asarray(
                Image.open(os.path.join(directory, rgb_rec[0])).convert("RGB"),
                dtype=np.float64) / 255.0
            depth_raw = np.asarray(
                Image.open(os.path.join(directory, depth_rec[0])), dtype=np.float64)
        except Exception as e:  # undecodable image: drop the frame
            log.warning("load_tum: dropping frame at t=%.6f (%s)", t_rgb, e)
            continue
        depth = depth_raw / intrinsics.depth_scale
        gt_pose = None
        if gt is not None:
            k = int(np.argmin(np.abs(gt_times - t_rgb)))
            if abs(gt_times[k] - t_rgb) <= association_window:
                vals = [float(v) for v in gt[k][1]]
                tx, ty, tz, qx, qy, qz, qw = vals
                gt_pose = SE3Pose(quat_to_rotation([qw, qx, qy, qz]),
                                  np.array([tx, ty, tz]))
        frames.append(RGBDFrame(t_rgb, rgb, depth, gt_pose))
    return RGBDDataset(frames, intrinsics)


def save_tum(dataset: RGBDDataset, directory) -> None:
    """Write a dataset as a TUM-layout directory (16-bit depth PNGs)."""
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    K = dataset.intrinsics
    rgb_lines, depth_lines, gt_lines = [], [], []
    for frame in dataset.frames:
        name = f"{frame.timestamp:.6f}.png"
        rgb8 = np.clip(frame.rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(rgb8).save(os.path.join(directory, "rgb", name))
        depth16 = np.clip(frame.depth * K.depth_scale + 0.5, 0, 65535).astype(np.uint16)
        Image.fromarray(depth16).save(os.path.join(directory, "depth", name))
        rgb_lines.append(f"{frame.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{frame.timestamp:.6f} depth/{name}")
        if frame.gt_pose is not None:
            q = rotation_to_quat(frame.gt_pose.rotation)
            t = frame.gt_pose.translation
            gt_lines.append(
                f"{frame.timestamp:.6f} "
                + " ".join(f"{v:.9g}" for v in (t[0], t[1], t[2], q[1], q[2], q[3], q[0]))
            )
    with open(os.path.join(directory, "rgb.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    if gt_lines:
        with open(os.path.join(directory, "groundtruth.txt"), "w") as f:
            f.write("# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n")


# -- trajectory text format ----------------------------------------------

def write_trajectory(poses, timestamps, path) -> None:
    """One line per pose: 'timestamp tx ty tz qx qy qz qw', 9 significant
    digits."""
    if len(poses) != len(timestamps):
        raise ValueError("poses and timestamps must have equal length")
    with open(path, "w") as f:
        for pose, t in zip(poses, timestamps):
            q = rotation_to_quat(pose.rotation)
            tr = pose.translation
            vals = (t, tr[0], tr[1], tr[2], q[1], q[2], q[3], q[0])
            f.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


def read_trajectory(path):
    """Inverse of write_trajectory. Returns (poses, timestamps).

    Quaternions are renormalized on read; deviations above 1e-3 are logged.
    """
    poses, timestamps = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            q = np.array([qw, qx, qy, qz])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > QUAT_NORM_WARN:
                log.warning("%s:%d: quaternion norm %.6f, renormalizing",
                            path, lineno, norm)
            poses.append(SE3Pose(quat_to_rotation(q / norm), np.array([tx, ty, tz])))
            timestamps.append(t)
    return poses, timestamps


# -- analytic SDF scenes --------------------------------------------------

class Primitive:
    """Analytic signed-distance primitive with a position-based color."""

    def sdf(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def color(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _stripes(p, axes=(0, 1), freqs=(4.0, 7.0), base=(0.55, 0.45, 0.4)):
    """Smooth periodic texture so photometric losses have gradients."""
    a = np.sin(freqs[0] * p[..., axes[0]])
    b = np.sin(freqs[1] * p[..., axes[1]])
    c = np.empty(p.shape[:-1] + (3,))
    c[..., 0] = base[0] + 0.35 * a
    c[..., 1] = base[1] + 0.35 * b
    c[..., 2] = base[2] + 0.30 * a * b
    return np.clip(c, 0.02, 0.98)


class Sphere(Primitive):
    def __init__(self, center, radius, base=(0.8, 0.3, 0.25)):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.base = base

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def color(self, p):
        return _stripes(p - self.center, axes=(0, 2), freqs=(21.0, 27.0), base=self.base)


class AxisBox(Primitive):
    def __init__(self, center, half_extents, base=(0.3, 0.5, 0.8)):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extents, dtype=np.float64)
        self.base = base

    def sdf(self, p):
        d = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside

    def color(self, p):
        return _stripes(p - self.center, axes=(1, 2), freqs=(23.0, 17.0), base=self.base)


class RoomShell(Primitive):
    """Solid walls everywhere outside an interior box; free space inside."""

    def __init__(self, half_extents, base=(0.55, 0.5, 0.45)):
        self.half = np.asarray(half_extents, dtype=np.float64)
        self.base = base

    def sdf(self, p):
        d = np.abs(p) - self.half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return -(outside + inside)

    def color(self, p):
        # Wavelengths of 25-35 cm: fine enough that centimeter-scale camera
        # motion produces a clear photometric change, coarse enough for the
        # 2 cm appearance grid to represent.
        return _stripes(p, axes=(0, 1), freqs=(19.0, 25.0), base=self.base)


@dataclass
class SyntheticScene:
    """Union (min) of analytic primitives; colors come from the nearest one."""

    primitives: list

    def sdf(self, p: np.ndarray) -> np.ndarray:
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        return values.min(axis=0)

    def color(self, p: np.ndarray) -> np.ndarray:
        values = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        owner = np.abs(values).argmin(axis=0)
        out = np.zeros(p.shape[:-1] + (3,))
        for i, prim in enumerate(self.primitives):
            mask = owner == i
            if mask.any():
                out[mask] = prim.color(p[mask])
        return out


def make_room_scene(room_half=(1.8, 1.8, 1.2)) -> SyntheticScene:
    """Closed textured room with furniture along every wall.

    Objects at varied depths and heights surround the whole orbit so that
    each viewing direction sees depth discontinuities and geometric edges;
    without them, views of a bare wall leave lateral camera motion nearly
    unobservable and tracking drifts.
    """
    hx, hy, hz = room_half
    return SyntheticScene(
        [
            RoomShell(room_half),
            AxisBox(center=(hx - 0.25, 0.0, 0.0), half_extents=(0.25, 0.5, 0.4)),
            AxisBox(center=(0.3, hy - 0.3, -0.2), half_extents=(0.4, 0.3, 0.55),
                    base=(0.7, 0.4, 0.3)),
            AxisBox(center=(-hx + 0.35, 0.6, 0.35), half_extents=(0.35, 0.25, 0.25),
                    base=(0.35, 0.7, 0.45)),
            AxisBox(center=(-0.6, -hy + 0.25, 0.1), half_extents=(0.25, 0.25, 0.6),
                    base=(0.6, 0.6, 0.3)),
            Sphere(center=(-hx + 0.45, -hy + 0.55, 0.1), radius=0.35),
            Sphere(center=(hx - 0.5, hy - 0.5, 0.45), radius=0.3,
                   base=(0.3, 0.45, 0.75)),
            Sphere(center=(0.9, -hy + 0.4, -0.5), radius=0.3,
                   base=(0.75, 0.65, 0.3)),
        ]
    )


def orbit_trajectory(n_frames, radius=0.3, yaw_range=2 * np.pi, z=0.0):
    """Camera on a horizontal circle looking outward; z forward, y down
    (world z is up). Constant angular velocity."""
    poses = []
    for i in range(n_frames):
        th = yaw_range * i / n_frames
        c, s = np.cos(th), np.sin(th)
        z_cam = np.array([c, s, 0.0])
        y_cam = np.array([0.0, 0.0, -1.0])
        x_cam = np.array([s, -c, 0.0])
        R = np.stack([x_cam, y_cam, z_cam], axis=1)
        t = np.array([radius * c, radius * s, z])
        poses.append(SE3Pose(R, t))
    return poses


def sphere_trace(scene: SyntheticScene, origins, dirs, t_max,
                 max_steps: int = 64, tol: float = 1e-5):
    """Distance along each unit ray to the zero level set; 0 on a miss."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * dirs[idx]
        d = scene.sdf(p)
        converged = np.abs(d) < tol
        hit[idx[converged]] = True
        active[idx[converged]] = False
        adv = idx[~converged]
        t[adv] += np.maximum(d[~converged], tol)
        overshoot = t[adv] > t_max
        active[adv[overshoot]] = False
    t[~hit] = 0.0
    return t


def synth_generate(scene: SyntheticScene, trajectory, K: CameraIntrinsics,
                   noise_sigma: float = 0.0, seed: int = 0,
                   far: float = 8.0) -> RGBDDataset:
    """Render an RGB-D dataset by sphere tracing the analytic scene.

    Depth is stored as z-depth (TUM convention); Gaussian depth noise of the
    given sigma is added per valid pixel and clamped non-negative.
    """
    rng = np.random.default_rng(seed)
    us, vs = np.meshgrid(np.arange(K.width), np.arange(K.height))
    us = us.ravel().astype(np.float64)
    vs = vs.ravel().astype(np.float64)
    frames = []
    for i, pose in enumerate(trajectory):
        origins, dirs, z_scale = pixel_ray_directions(us, vs, K, pose)
        t_hit = sphere_trace(scene, origins, dirs, t_max=far * z_scale.max())
        valid = t_hit > 0
        z = np.where(valid, t_hit / z_scale, 0.0)
        colors = np.zeros((us.size, 3))
        if valid.any():
            pts = origins[valid] + t_hit[valid, None] * dirs[valid]
            colors[valid] = scene.color(pts)
        depth = z.reshape(K.height, K.width)
        if noise_sigma > 0:
            noise = rng.normal(0.0, noise_sigma, size=depth.shape)
            depth = np.where(depth > 0, np.maximum(depth + noise, 0.0), 0.0)
        frames.append(
            RGBDFrame(
                timestamp=i / 30.0,
                rgb=colors.reshape(K.height, K.width, 3),
                depth=depth,
                gt_pose=pose,
            )
        )
    return RGBDDataset(frames, K)
