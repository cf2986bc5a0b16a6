"""Rigid-body math, pinhole camera model, rays, and pixel reprojection.

Conventions: poses map camera-frame points into the world frame
(p_world = R @ p_cam + t). Pixels are (u, v) with u along image width and
pixel centers at integer coordinates. A pixel is in view iff
0 <= u < width and 0 <= v < height.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle (radians) the Rodrigues coefficients switch to
# their second-order series expansions.
SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class Twist:
    """Tangent-space pose increment: axis-angle rotation + translation."""

    rotational: np.ndarray  # (3,) radians, axis-angle
    translational: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "rotational", np.asarray(self.rotational, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translational", np.asarray(self.translational, dtype=np.float64).reshape(3))

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        """6-vector (translational, rotational)."""
        return np.concatenate([self.translational, self.rotational])

    @staticmethod
    def from_vector(v) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Twist(rotational=v[3:], translational=v[:3])


@dataclass(frozen=True)
class SE3Pose:
    """Rigid camera pose: orthonormal rotation (det +1) and translation."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    def check_valid(self, tol: float = 1e-9) -> None:
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose contains non-finite entries")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > tol * 1e3:  # accumulated float error; 1e-6 absolute guard
            raise ValueError(f"rotation not orthonormal (deviation {err:.3e})")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant")

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points by this pose."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,) meters
    direction: np.ndarray  # (3,) unit

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction not unit length (|d| = {n})")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a second-order series branch for small angles."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp for rotation magnitude < pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < SMALL_ANGLE:
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
        return w
    return theta / (2.0 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < SMALL_ANGLE:
        b = 0.5 - theta * theta / 24.0
        c = 1.0 / 6.0 - theta * theta / 120.0
    else:
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + b * K + c * (K @ K)


def se3_exp(t: Twist) -> SE3Pose:
    """Exponential map: Rodrigues rotation plus the SE(3) left-Jacobian
    acting on the translational part."""
    R = so3_exp(t.rotational)
    V = _left_jacobian(t.rotational)
    return SE3Pose(R, V @ t.translational)


def se3_log(p: SE3Pose) -> Twist:
    """Inverse of se3_exp (rotation magnitude < pi)."""
    omega = so3_log(p.rotation)
    V = _left_jacobian(omega)
    rho = np.linalg.solve(V, p.translation)
    return Twist(rotational=omega, translational=rho)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: SE3Pose) -> SE3Pose:
    Rt = p.rotation.T
    return SE3Pose(Rt, -Rt @ p.translation)


def apply_twist(t: Twist, p: SE3Pose) -> SE3Pose:
    """Left-compose a tangent-space increment onto a pose and re-validate."""
    out = compose(se3_exp(t), p)
    # Re-project the rotation onto SO(3) to cancel accumulated round-off.
    U, _, Vt = np.linalg.svd(out.rotation)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    out = SE3Pose(R, out.translation)
    out.check_valid()
    return out


def backproject(u, v, depth, K: CameraIntrinsics) -> np.ndarray:
    """Pixel(s) + z-depth(s) to camera-frame 3D points, shape (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def project(points_cam: np.ndarray, K: CameraIntrinsics):
    """Camera-frame points to pixels. Returns (u, v, z)."""
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * points_cam[..., 0] / z + K.cx
        v = K.fy * points_cam[..., 1] / z + K.cy
    return u, v, z


def reproject(u, v, depth, K: CameraIntrinsics, T_cur: SE3Pose, T_ref: SE3Pose):
    """Map pixels of the current frame into the reference frame.

    Returns (u_ref, v_ref, in_view). Points behind the reference camera
    (z <= 0) or outside the image bounds are flagged out-of-view.
    Non-positive depths are rejected.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("reproject requires strictly positive depth")
    p_cam = backproject(u, v, depth, K)
    p_world = T_cur.apply(p_cam)
    p_ref = inverse(T_ref).apply(p_world)
    u_ref, v_ref, z_ref = project(p_ref, K)
    # small tolerance: border pixels must survive round-trip round-off
    eps = 1e-9
    in_view = (
        (z_ref > 0)
        & (u_ref >= -eps)
        & (u_ref <= K.width - 1 + eps)
        & (v_ref >= -eps)
        & (v_ref <= K.height - 1 + eps)
    )
    return u_ref, v_ref, in_view


def pixel_ray_directions(us, vs, K: CameraIntrinsics, pose: SE3Pose):
    """World-frame unit ray directions through the given pixels.

    Returns (origins (N,3), dirs (N,3), z_scale (N,)) where z_scale converts
    a z-depth into distance along the unit ray (t = z * z_scale).
    """
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d_cam = np.stack(
        [(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1
    )
    norms = np.linalg.norm(d_cam, axis=-1)
    d_cam = d_cam / norms[..., None]
    d_world = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, d_world.shape)
    return origins, d_world, norms
