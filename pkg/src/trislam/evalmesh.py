"""Mesh extraction from an SDF, trajectory/mesh/depth metrics, and PLY IO.

Metric conventions: distances are reported in centimeters, completion ratio
in percent. Trajectory alignment is rigid (rotation + translation, no scale)
since RGB-D input fixes metric scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .geometry import CameraIntrinsics, SE3Pose, inverse

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

log = logging.getLogger(__name__)

DEFAULT_CELL_SIZE = 0.02  # meters
DEFAULT_SAMPLE_COUNT = 200_000
DEFAULT_COMPLETION_THRESHOLD = 0.05  # meters


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) int indices
    colors: np.ndarray = None  # optional (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self) -> "TriangleMesh":
        """Drop zero-area faces and unreferenced vertices."""
        keep = self.triangle_areas() > 0
        faces = self.faces[keep]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        colors = self.colors[used] if self.colors is not None else None
        return TriangleMesh(self.vertices[used], remap[faces], colors)

    def connected_components(self) -> int:
        """Number of vertex-connected components (union-find over edges)."""
        parent = np.arange(len(self.vertices))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for f in self.faces:
            a = find(f[0])
            for j in (1, 2):
                b = find(f[j])
                parent[b] = a
        roots = {find(i) for i in np.unique(self.faces)}
        return len(roots)


def write_ply(mesh: TriangleMesh, path) -> None:
    """ASCII PLY with optional per-vertex colors."""
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if mesh.colors is not None:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element face {len(mesh.faces)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        if mesh.colors is not None:
            rgb = np.clip(mesh.colors * 255.0 + 0.5, 0, 255).astype(int)
            for v, c in zip(mesh.vertices, rgb):
                f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
        else:
            for v in mesh.vertices:
                f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for face in mesh.faces:
            f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


def read_ply(path) -> TriangleMesh:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vert = n_face = 0
        has_color = False
        while True:
            line = f.readline().strip()
            if line.startswith("element vertex"):
                n_vert = int(line.split()[-1])
            elif line.startswith("element face"):
                n_face = int(line.split()[-1])
            elif line.startswith("property uchar red"):
                has_color = True
            elif line == "end_header":
                break
        verts = np.empty((n_vert, 3))
        colors = np.empty((n_vert, 3)) if has_color else None
        for i in range(n_vert):
            parts = f.readline().split()
            verts[i] = [float(x) for x in parts[:3]]
            if has_color:
                colors[i] = [int(x) / 255.0 for x in parts[3:6]]
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            parts = f.readline().split()
            faces[i] = [int(x) for x in parts[1:4]]
    return TriangleMesh(verts, faces, colors)


# -- extraction -----------------------------------------------------------

def extract_mesh(sdf_fn, bounds, cell_size: float = DEFAULT_CELL_SIZE,
                 color_fn=None, poses=None, depths=None,
                 K: CameraIntrinsics = None, truncation: float = 0.10,
                 chunk: int = 262_144) -> TriangleMesh:
    """Marching cubes over a regular grid of SDF samples.

    When observation data (poses, depth images, intrinsics) is supplied,
    triangles whose vertices were never inside a camera frustum, or lie more
    than 2x truncation behind every observed depth along their viewing rays,
    are culled. An empty zero level set yields an empty mesh.
    """
    lo = np.asarray(bounds.lo, dtype=np.float64)
    hi = np.asarray(bounds.hi, dtype=np.float64)
    ns = np.maximum(np.ceil((hi - lo) / cell_size).astype(int) + 1, 2)
    xs = [lo[d] + cell_size * np.arange(ns[d]) for d in range(3)]
    gx, gy, gz = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vol = np.empty(pts.shape[0])
    for i in range(0, pts.shape[0], chunk):
        vol[i:i + chunk] = sdf_fn(pts[i:i + chunk])
    vol = vol.reshape(ns)
    try:
        verts, faces, _, _ = measure.marching_cubes(
            vol, level=0.0, spacing=(cell_size,) * 3)
    except (ValueError, RuntimeError):
        log.warning("extract_mesh: zero level set is empty")
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    verts = verts + lo

    if poses is not None and depths is not None and K is not None:
        observed = np.zeros(len(verts), dtype=bool)
        for pose, depth_img in zip(poses, depths):
            cam = inverse(pose).apply(verts)
            z = cam[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = K.fx * cam[:, 0] / z + K.cx
                v = K.fy * cam[:, 1] / z + K.cy
            in_view = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
            idx = np.nonzero(in_view)[0]
            ui = np.clip(u[idx].astype(int), 0, K.width - 1)
            vi = np.clip(v[idx].astype(int), 0, K.height - 1)
            d_obs = depth_img[vi, ui]
            ok = (d_obs <= 0) | (z[idx] <= d_obs + 2.0 * truncation)
            observed[idx[ok]] = True
        face_ok = observed[faces].all(axis=1)
        faces = faces[face_ok]

    colors = None
    if color_fn is not None and len(verts):
        colors = np.clip(color_fn(verts), 0.0, 1.0)
    return TriangleMesh(verts, faces, colors).cleaned()


# -- trajectory metric ----------------------------------------------------

def ate_rmse(estimated, ground_truth) -> float:
    """Absolute trajectory error RMSE in cm after rigid alignment."""
    if len(estimated) != len(ground_truth):
        raise ValueError("trajectory lengths differ")
    if len(estimated) < 2:
        raise ValueError("need at least two poses")
    e = np.stack([p.translation for p in estimated])
    g = np.stack([p.translation for p in ground_truth])
    mu_e = e.mean(axis=0)
    mu_g = g.mean(axis=0)
    H = (e - mu_e).T @ (g - mu_g)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_g - R @ mu_e
    residual = g - (e @ R.T + t)
    return float(np.sqrt((residual ** 2).sum(axis=1).mean())) * 100.0


# -- mesh-to-mesh metrics -------------------------------------------------

def sample_surface(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """Uniform area-weighted surface samples, shape (n, 3)."""
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(mesh.faces), size=n, p=probs)
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def _point_triangle_distance(p, a, b, c) -> np.ndarray:
    """Exact distance from points p to triangles (a, b, c), all (N, 3)."""
    best = np.full(len(p), np.inf)
    # edges: closest point on each segment
    for s, e in ((a, b), (b, c), (c, a)):
        d = e - s
        denom = np.maximum((d * d).sum(axis=1), 1e-300)
        t = np.clip(((p - s) * d).sum(axis=1) / denom, 0.0, 1.0)
        q = s + t[:, None] * d
        best = np.minimum(best, np.linalg.norm(p - q, axis=1))
    # interior: orthogonal projection when it lands inside the triangle
    n = np.cross(b - a, c - a)
    nn = (n * n).sum(axis=1)
    ok = nn > 1e-300
    if ok.any():
        ap = p - a
        dist_plane = (ap * n).sum(axis=1) / np.sqrt(np.maximum(nn, 1e-300))
        proj = p - dist_plane[:, None] * (n / np.sqrt(np.maximum(nn, 1e-300))[:, None])
        v0, v1, v2 = c - a, b - a, proj - a
        d00 = (v0 * v0).sum(axis=1)
        d01 = (v0 * v1).sum(axis=1)
        d11 = (v1 * v1).sum(axis=1)
        d02 = (v0 * v2).sum(axis=1)
        d12 = (v1 * v2).sum(axis=1)
        denom = np.maximum(d00 * d11 - d01 * d01, 1e-300)
        u = (d11 * d02 - d01 * d12) / denom
        v = (d00 * d12 - d01 * d02) / denom
        inside = ok & (u >= 0) & (v >= 0) & (u + v <= 1)
        best = np.where(inside, np.minimum(best, np.abs(dist_plane)), best)
    return best


def point_mesh_distance(points, mesh: TriangleMesh, k: int = 12) -> np.ndarray:
    """Distance from each point to the mesh surface.

    Candidate triangles come from a KD-tree over centroids; the distance to
    each candidate is exact, so the result is exact whenever the true nearest
    triangle is among the k candidates (k generous relative to cell size).
    """
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    centroids = (a + b + c) / 3.0
    tree = cKDTree(centroids)
    k = min(k, len(mesh.faces))
    _, idx = tree.query(points, k=k)
    idx = idx.reshape(len(points), k)
    best = np.full(len(points), np.inf)
    for j in range(k):
        tri = idx[:, j]
        best = np.minimum(best, _point_triangle_distance(points, a[tri], b[tri], c[tri]))
    return best


def mesh_metrics(reconstructed: TriangleMesh, reference: TriangleMesh,
                 n_samples: int = DEFAULT_SAMPLE_COUNT,
                 threshold: float = DEFAULT_COMPLETION_THRESHOLD,
                 seed: int = 0):
    """(accuracy cm, completion cm, completion ratio %).

    Accuracy: mean distance from reconstructed-surface samples to the
    reference. Completion: the reverse. Completion ratio: percent of
    reference samples within the threshold of the reconstruction.
    """
    if reconstructed.is_empty() or reference.is_empty():
        raise ValueError("mesh_metrics requires non-empty meshes")
    rng = np.random.default_rng(seed)
    rec_pts = sample_surface(reconstructed, n_samples, rng)
    ref_pts = sample_surface(reference, n_samples, rng)
    d_rec = point_mesh_distance(rec_pts, reference)
    d_ref = point_mesh_distance(ref_pts, reconstructed)
    acc = float(d_rec.mean()) * 100.0
    comp = float(d_ref.mean()) * 100.0
    ratio = float((d_ref < threshold).mean()) * 100.0
    return acc, comp, ratio


# -- depth rendering and Depth L1 ----------------------------------------

def _render_depth_numpy(verts_cam, faces, K: CameraIntrinsics, near: float):
    depth = np.full((K.height, K.width), np.inf)
    z = verts_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        us = K.fx * verts_cam[:, 0] / z + K.cx
        vs = K.fy * verts_cam[:, 1] / z + K.cy
    for f in faces:
        z0, z1, z2 = z[f]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        u0, u1, u2 = us[f]
        v0, v1, v2 = vs[f]
        umin = max(int(np.ceil(min(u0, u1, u2))), 0)
        umax = min(int(np.floor(max(u0, u1, u2))), K.width - 1)
        vmin = max(int(np.ceil(min(v0, v1, v2))), 0)
        vmax = min(int(np.floor(max(v0, v1, v2))), K.height - 1)
        if umin > umax or vmin > vmax:
            continue
        den = (v1 - v2) * (u0 - u2) + (u2 - u1) * (v0 - v2)
        if abs(den) < 1e-12:
            continue
        uu, vv = np.meshgrid(np.arange(umin, umax + 1), np.arange(vmin, vmax + 1))
        l0 = ((v1 - v2) * (uu - u2) + (u2 - u1) * (vv - v2)) / den
        l1 = ((v2 - v0) * (uu - u2) + (u0 - u2) * (vv - v2)) / den
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        zi = 1.0 / (l0 / z0 + l1 / z1 + l2 / z2)
        patch = depth[vmin:vmax + 1, umin:umax + 1]
        np.minimum(patch, np.where(inside, zi, np.inf), out=patch)
    depth[~np.isfinite(depth)] = 0.0
    return depth


if HAVE_NUMBA:
    @njit(cache=True)
    def _render_depth_kernel(verts_cam, faces, fx, fy, cx, cy, width, height,
                             near, depth):  # pragma: no cover - jitted
        for f in range(faces.shape[0]):
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            z0, z1, z2 = verts_cam[i0, 2], verts_cam[i1, 2], verts_cam[i2, 2]
            if z0 <= near or z1 <= near or z2 <= near:
                continue
            u0 = fx * verts_cam[i0, 0] / z0 + cx
            v0 = fy * verts_cam[i0, 1] / z0 + cy
            u1 = fx * verts_cam[i1, 0] / z1 + cx
            v1 = fy * verts_cam[i1, 1] / z1 + cy
            u2 = fx * verts_cam[i2, 0] / z2 + cx
            v2 = fy * verts_cam[i2, 1] / z2 + cy
            umin = max(int(np.ceil(min(u0, min(u1, u2)))), 0)
            umax = min(int(np.floor(max(u0, max(u1, u2)))), width - 1)
            vmin = max(int(np.ceil(min(v0, min(v1, v2)))), 0)
            vmax = min(int(np.floor(max(v0, max(v1, v2)))), height - 1)
            if umin > umax or vmin > vmax:
                continue
            den = (v1 - v2) * (u0 - u2) + (u2 - u1) * (v0 - v2)
            if abs(den) < 1e-12:
                continue
            iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
            for vv in range(vmin, vmax + 1):
                for uu in range(umin, umax + 1):
                    l0 = ((v1 - v2) * (uu - u2) + (u2 - u1) * (vv - v2)) / den
                    l1 = ((v2 - v0) * (uu - u2) + (u0 - u2) * (vv - v2)) / den
                    l2 = 1.0 - l0 - l1
                    if l0 < -1e-9 or l1 < -1e-9 or l2 < -1e-9:
                        continue
                    zi = 1.0 / (l0 * iz0 + l1 * iz1 + l2 * iz2)
                    if zi < depth[vv, uu]:
                        depth[vv, uu] = zi


def render_mesh_depth(mesh: TriangleMesh, pose: SE3Pose, K: CameraIntrinsics,
                      near: float = 0.01) -> np.ndarray:
    """Z-buffer depth render of the mesh from the given camera pose.

    Returns a (H, W) z-depth image with 0 where no triangle is hit. Depth is
    perspective-correct (1/z interpolated in screen space).
    """
    verts_cam = inverse(pose).apply(mesh.vertices)
    if HAVE_NUMBA:
        depth = np.full((K.height, K.width), np.inf)
        _render_depth_kernel(verts_cam, np.ascontiguousarray(mesh.faces),
                             K.fx, K.fy, K.cx, K.cy, K.width, K.height,
                             near, depth)
        depth[~np.isfinite(depth)] = 0.0
        return depth
    return _render_depth_numpy(verts_cam, mesh.faces, K, near)


def render_sdf_depth(sdf_fn, pose: SE3Pose, K: CameraIntrinsics,
                     near: float = 0.01, far: float = 8.0,
                     n_steps: int = 192, chunk: int = 4096) -> np.ndarray:
    """Depth by locating the first SDF sign change along each pixel ray.

    Works for learned fields that are only locally metric: samples the ray
    uniformly and linearly interpolates the crossing.
    """
    from .geometry import pixel_ray_directions

    us, vs = np.meshgrid(np.arange(K.width), np.arange(K.height))
    us = us.ravel().astype(np.float64)
    vs = vs.ravel().astype(np.float64)
    origins, dirs, z_scale = pixel_ray_directions(us, vs, K, pose)
    ts = np.linspace(near, far, n_steps)
    depth = np.zeros(us.size)
    for i in range(0, us.size, chunk):
        o = origins[i:i + chunk]
        d = dirs[i:i + chunk]
        pts = o[:, None, :] + ts[None, :, None] * d[:, None, :]
        s = sdf_fn(pts.reshape(-1, 3)).reshape(len(o), n_steps)
        neg = s < 0
        first = neg.argmax(axis=1)
        hit = neg.any(axis=1) & (first > 0)
        idx = np.nonzero(hit)[0]
        j = first[idx]
        s0 = s[idx, j - 1]
        s1 = s[idx, j]
        frac = s0 / np.maximum(s0 - s1, 1e-12)
        t_hit = ts[j - 1] + frac * (ts[1] - ts[0])
        depth[i + idx] = t_hit / z_scale[i:i + chunk][idx]
    return depth.reshape(K.height, K.width)


def depth_l1(poses, K: CameraIntrinsics, frames, mesh: TriangleMesh = None,
             sdf_fn=None, max_depth: float = 8.0, frame_stride: int = 1) -> float:
    """Mean absolute depth error in cm over pixels valid in both the render
    and the ground truth."""
    if (mesh is None) == (sdf_fn is None):
        raise ValueError("provide exactly one of mesh or sdf_fn")
    total = 0.0
    count = 0
    for pose, frame in list(zip(poses, frames))[::frame_stride]:
        if mesh is not None:
            rendered = render_mesh_depth(mesh, pose, K)
        else:
            rendered = render_sdf_depth(sdf_fn, pose, K, far=max_depth)
        gt = frame.depth
        mask = (gt > 0) & (gt <= max_depth) & (rendered > 0)
        total += float(np.abs(rendered[mask] - gt[mask]).sum())
        count += int(mask.sum())
    if count == 0:
        raise ValueError("depth_l1: no overlapping valid pixels")
    return total / count * 100.0


@dataclass
class MetricsReport:
    ate_rmse_cm: float = None
    depth_l1_cm: float = None
    acc_cm: float = None
    comp_cm: float = None
    comp_ratio_pct: float = None
    param_mb: float = None
    runtime_s: float = None

    def format(self) -> str:
        lines = ["metric value unit"]
        for name, value, unit in (
            ("ate_rmse", self.ate_rmse_cm, "cm"),
            ("depth_l1", self.depth_l1_cm, "cm"),
            ("acc", self.acc_cm, "cm"),
            ("comp", self.comp_cm, "cm"),
            ("comp_ratio", self.comp_ratio_pct, "%"),
            ("param_size", self.param_mb, "MB"),
            ("runtime", self.runtime_s, "s"),
        ):
            if value is not None:
                lines.append(f"{name} {value:.6g} {unit}")
        return "\n".join(lines) + "\n"
