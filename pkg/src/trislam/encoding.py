"""Multi-resolution sparse tri-plane encoding plus baseline backends.

A world point is projected onto the xy / xz / yz planes; each projection is
bilinearly interpolated from a per-level 2D feature grid whose vertices live
either in a raw row-major table (when the grid fits) or a fixed-size hash
table. Per-level features from the three planes are concatenated,
level-major then (xy, xz, yz).

Baselines: a dense tri-plane (full tables, no hashing) and a 3D hash grid
(trilinear over hashed voxel vertices) used for ablation comparisons.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

PRIME_1 = np.uint32(1)
PRIME_2 = np.uint32(2654435761)
PRIME_3 = np.uint32(805459861)

BYTES_PER_FEATURE = 4  # features serialize as little-endian float32


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned scene box in meters."""

    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(hi <= lo):
            raise ValueError("bounds must have positive extent on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def max_extent(self) -> float:
        return float(self.extent.max())


DEFAULT_BOUNDS = Bounds(np.array([-2.0, -2.0, -2.0]), np.array([2.0, 2.0, 2.0]))


@dataclass(frozen=True)
class EncodingConfig:
    levels: int = 16
    hash_exponent: int = 18
    features_per_level: int = 2
    coarsest_resolution: int = 16
    finest_cell_size: float = 0.02
    scene_bounds: Bounds = DEFAULT_BOUNDS
    finest_resolution: int | None = None  # overrides finest_cell_size when set
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be positive")
        if not 14 <= self.hash_exponent <= 24:
            raise ValueError("hash_exponent must lie in [14, 24]")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be positive")
        if self.coarsest_resolution < 2:
            raise ValueError("coarsest_resolution must be at least 2")
        if self.finest_cell_size <= 0:
            raise ValueError("finest_cell_size must be positive")

    @property
    def finest(self) -> int:
        if self.finest_resolution is not None:
            return int(self.finest_resolution)
        return int(np.ceil(self.scene_bounds.max_extent / self.finest_cell_size))

    def level_resolutions(self) -> list[int]:
        """Geometric growth from the coarsest to the finest resolution."""
        L = self.levels
        finest = self.finest
        if L == 1:
            return [finest]
        coarsest = self.coarsest_resolution
        g = (finest / coarsest) ** (1.0 / (L - 1))
        res = [int(np.floor(coarsest * g ** l + 1e-9)) for l in range(L)]
        res[-1] = finest
        return res

    @property
    def table_capacity(self) -> int:
        return 1 << self.hash_exponent


def hash2d(x: np.ndarray, T: int) -> np.ndarray:
    """Spatial hash of 2D integer vertex coordinates into [0, 2^T).

    index = (x0 * 1  XOR  x1 * 2654435761) mod 2^T, products taken in
    wrapping 32-bit unsigned arithmetic.
    """
    if not 14 <= T <= 24:
        raise ValueError("hash exponent must lie in [14, 24]")
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        h = (x[..., 0].astype(np.uint32) * PRIME_1) ^ (
            x[..., 1].astype(np.uint32) * PRIME_2
        )
    return (h & np.uint32((1 << T) - 1)).astype(np.int64)


def hash3d(x: np.ndarray, T: int) -> np.ndarray:
    """3D variant with a third prime multiplier."""
    if not 14 <= T <= 24:
        raise ValueError("hash exponent must lie in [14, 24]")
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        h = (
            (x[..., 0].astype(np.uint32) * PRIME_1)
            ^ (x[..., 1].astype(np.uint32) * PRIME_2)
            ^ (x[..., 2].astype(np.uint32) * PRIME_3)
        )
    return (h & np.uint32((1 << T) - 1)).astype(np.int64)


AXIS_PAIRS = (("xy", (0, 1)), ("xz", (0, 2)), ("yz", (1, 2)))


class PlaneGrid:
    """One 2D feature grid level: raw-indexed when it fits, hashed otherwise."""

    def __init__(self, resolution, features, hash_exponent, axis_pair, rng,
                 dense=False):
        self.resolution = int(resolution)
        self.features = int(features)
        self.hash_exponent = int(hash_exponent)
        self.axis_pair = axis_pair
        cap = 1 << self.hash_exponent
        n_vertices = self.resolution ** 2
        if dense:
            self.table_len = n_vertices
            self.hashed = False
        else:
            self.table_len = min(n_vertices, cap)
            self.hashed = n_vertices > cap
        self.table = rng.uniform(-1e-4, 1e-4, size=(self.table_len, self.features))
        self.grad = np.zeros_like(self.table)

    @classmethod
    def _wrap(cls, resolution, features, hash_exponent, axis_pair,
              table_view, grad_view, hashed):
        """View-backed grid sharing an encoding's contiguous storage."""
        obj = cls.__new__(cls)
        obj.resolution = int(resolution)
        obj.features = int(features)
        obj.hash_exponent = int(hash_exponent)
        obj.axis_pair = axis_pair
        obj.table_len = table_view.shape[0]
        obj.hashed = bool(hashed)
        obj.table = table_view
        obj.grad = grad_view
        return obj

    def vertex_index(self, ij: np.ndarray) -> np.ndarray:
        """Table index of integer vertex coordinates (..., 2)."""
        if self.hashed:
            return hash2d(ij, self.hash_exponent)
        return ij[..., 0].astype(np.int64) * self.resolution + ij[..., 1].astype(np.int64)


@dataclass
class _PlaneLookupCtx:
    idx: np.ndarray  # (N, 4) table indices
    w: np.ndarray  # (N, 4) bilinear weights
    feats: np.ndarray  # (N, 4, F) gathered corner features
    dwa: np.ndarray  # (N, 4) d w / d a  (already includes the res-1 scale)
    dwb: np.ndarray  # (N, 4)


def plane_lookup(plane: PlaneGrid, p: np.ndarray):
    """Bilinear interpolation on a plane grid, p in [0,1]^2 (clamped).

    Returns (features (N, F), ctx); ctx carries everything backward needs,
    including the analytic derivative of the output w.r.t. p.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    res = plane.resolution
    x = p * (res - 1)
    i = np.minimum(np.floor(x).astype(np.int64), res - 2)
    f = x - i
    fa, fb = f[..., 0], f[..., 1]

    # corner order: (0,0), (1,0), (0,1), (1,1) in (a, b) offsets
    offs = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)
    corners = i[..., None, :] + offs  # (N, 4, 2)
    idx = plane.vertex_index(corners)  # (N, 4)

    w = np.stack(
        [(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb], axis=-1
    )
    scale = float(res - 1)
    dwa = np.stack([-(1 - fb), (1 - fb), -fb, fb], axis=-1) * scale
    dwb = np.stack([-(1 - fa), -fa, (1 - fa), fa], axis=-1) * scale

    feats = plane.table[idx]  # (N, 4, F)
    out = np.einsum("nc,ncf->nf", w, feats)
    return out, _PlaneLookupCtx(idx=idx, w=w, feats=feats, dwa=dwa, dwb=dwb)


def _scatter_plane_grad(plane: PlaneGrid, ctx: _PlaneLookupCtx, g: np.ndarray):
    """Accumulate upstream (N, F) into the plane gradient table."""
    contrib = ctx.w[..., None] * g[:, None, :]  # (N, 4, F)
    flat_idx = ctx.idx.ravel()
    for f in range(plane.features):
        plane.grad[:, f] += np.bincount(
            flat_idx, weights=contrib[..., f].ravel(), minlength=plane.table_len
        )


def _plane_position_grad(ctx: _PlaneLookupCtx, g: np.ndarray):
    """d(sum upstream * feat)/d p for one plane; returns (N, 2)."""
    fg = np.einsum("ncf,nf->nc", ctx.feats, g)  # (N, 4)
    da = np.einsum("nc,nc->n", ctx.dwa, fg)
    db = np.einsum("nc,nc->n", ctx.dwb, fg)
    return da, db


@dataclass
class EncodeContext:
    """Gradient routing record produced by encode()."""

    owner: object
    n_points: int
    plane_ctxs: list | None  # per-plane lookup records (numpy path only)
    dq_dp: np.ndarray  # (N, 3) chain factor of normalization + clamping
    q: np.ndarray = None  # (N, 3) normalized points (kernel path recomputes)


class _EncodingBase:
    """Shared plumbing for the tri-plane and 3D hash-grid backends."""

    config: EncodingConfig
    feature_dim: int

    def _normalize(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if not np.all(np.isfinite(points)):
            raise ValueError("encode requires finite points")
        b = self.config.scene_bounds
        clamped = np.clip(points, b.lo, b.hi)
        scale = 1.0 / b.max_extent
        q = (clamped - b.lo) * scale
        inside = (points >= b.lo) & (points <= b.hi)
        dq_dp = np.where(inside, scale, 0.0)
        return q, dq_dp

    def named_tables(self):
        raise NotImplementedError

    def zero_grad(self):
        for _, _, grad in self.named_tables():
            grad.fill(0.0)

    def encode(self, points: np.ndarray):
        raise NotImplementedError

    def encode_backward(self, ctx: EncodeContext, upstream: np.ndarray,
                        accumulate: bool = True) -> np.ndarray:
        raise NotImplementedError

    def param_count(self) -> "ParamCount":
        levels = []
        for l, planes in enumerate(self._levels_for_count()):
            entries = sum(p.table_len for p in planes)
            levels.append(
                {
                    "level": l,
                    "resolution": planes[0].resolution,
                    "entries": entries,
                    "bytes": entries * self.config.features_per_level * BYTES_PER_FEATURE,
                }
            )
        total_entries = sum(lv["entries"] for lv in levels)
        total_bytes = sum(lv["bytes"] for lv in levels)
        return ParamCount(levels=levels, total_entries=total_entries, total_bytes=total_bytes)

    def _levels_for_count(self):
        raise NotImplementedError


@dataclass
class ParamCount:
    levels: list
    total_entries: int
    total_bytes: int

    @property
    def megabytes(self) -> float:
        return self.total_bytes / 1e6


class SparseTriplane(_EncodingBase):
    """Multi-level tri-plane with per-level hash-bounded feature tables.

    Feature tables of every level/plane live in one contiguous array; the
    per-plane PlaneGrid objects are views into it. The hot encode/backward
    paths run through compiled kernels when numba is present and fall back
    to the pure-numpy plane_lookup path otherwise.
    """

    variant = "sparse_triplane"
    _dense = False

    def __init__(self, config: EncodingConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        F = config.features_per_level
        cap = config.table_capacity
        resolutions = config.level_resolutions()
        self._res = np.asarray(resolutions, dtype=np.int64)
        if self._dense:
            caps = [r * r for r in resolutions]
            self._hashed = np.zeros(len(resolutions), dtype=np.bool_)
        else:
            caps = [min(r * r, cap) for r in resolutions]
            self._hashed = np.asarray([r * r > cap for r in resolutions], dtype=np.bool_)
        self._caps = np.asarray(caps, dtype=np.int64)
        self._offsets = np.zeros((len(resolutions), 3), dtype=np.int64)
        total = 0
        for l, c in enumerate(caps):
            for pl in range(3):
                self._offsets[l, pl] = total
                total += c
        self.storage = rng.uniform(-1e-4, 1e-4, size=(total, F))
        self.storage_grad = np.zeros_like(self.storage)
        self.levels = []
        for l, res in enumerate(resolutions):
            planes = []
            for pl, (name, _) in enumerate(AXIS_PAIRS):
                o = self._offsets[l, pl]
                planes.append(
                    PlaneGrid._wrap(res, F, config.hash_exponent, name,
                                    self.storage[o:o + caps[l]],
                                    self.storage_grad[o:o + caps[l]],
                                    self._hashed[l])
                )
            self.levels.append(planes)
        self.feature_dim = 3 * config.levels * F

    def named_tables(self):
        yield "tables", self.storage, self.storage_grad

    def _levels_for_count(self):
        return self.levels

    def encode(self, points: np.ndarray):
        q, dq_dp = self._normalize(points)
        n = q.shape[0]
        F = self.config.features_per_level
        if _kernels.HAVE_NUMBA:
            out = np.zeros((n, self.feature_dim))
            _kernels.triplane_forward(q, self._res, self._hashed, self._offsets,
                                      self._caps, self.storage, F, out)
            return out, EncodeContext(owner=self, n_points=n, plane_ctxs=None,
                                      dq_dp=dq_dp, q=q)
        out = np.empty((n, self.feature_dim))
        plane_ctxs = []
        col = 0
        for planes in self.levels:
            for plane, (_, axes) in zip(planes, AXIS_PAIRS):
                feats, ctx = plane_lookup(plane, q[:, axes])
                out[:, col:col + F] = feats
                plane_ctxs.append(ctx)
                col += F
        return out, EncodeContext(owner=self, n_points=n, plane_ctxs=plane_ctxs,
                                  dq_dp=dq_dp, q=q)

    def encode_backward(self, ctx: EncodeContext, upstream: np.ndarray,
                        accumulate: bool = True) -> np.ndarray:
        if ctx.owner is not self:
            raise ValueError("gradient record does not belong to this encoding")
        upstream = np.ascontiguousarray(upstream, dtype=np.float64)
        if upstream.shape != (ctx.n_points, self.feature_dim):
            raise ValueError("upstream gradient shape mismatch")
        F = self.config.features_per_level
        if ctx.plane_ctxs is None:
            dq = np.zeros((ctx.n_points, 3))
            if accumulate and _kernels.num_threads() == 1:
                _kernels.triplane_backward_fused(ctx.q, self._res, self._hashed,
                                                 self._offsets, self._caps,
                                                 self.storage, F, upstream,
                                                 self.storage_grad, dq)
                return dq * ctx.dq_dp
            _kernels.triplane_position_grad(ctx.q, self._res, self._hashed,
                                            self._offsets, self._caps,
                                            self.storage, F, upstream, dq)
            if accumulate:
                _kernels.triplane_scatter(ctx.q, self._res, self._hashed,
                                          self._offsets, self._caps, F, upstream,
                                          self.storage_grad, _kernels.num_threads())
            return dq * ctx.dq_dp
        dq = np.zeros((ctx.n_points, 3))
        col = 0
        k = 0
        for planes in self.levels:
            for plane, (_, axes) in zip(planes, AXIS_PAIRS):
                g = upstream[:, col:col + F]
                pc = ctx.plane_ctxs[k]
                if accumulate:
                    _scatter_plane_grad(plane, pc, g)
                da, db = _plane_position_grad(pc, g)
                dq[:, axes[0]] += da
                dq[:, axes[1]] += db
                col += F
                k += 1
        return dq * ctx.dq_dp


class DenseTriplane(SparseTriplane):
    """Baseline: full per-level tables, no hash saturation."""

    variant = "dense_triplane"
    _dense = True


@dataclass
class _VoxelLookupCtx:
    idx: np.ndarray  # (N, 8)
    w: np.ndarray  # (N, 8)
    feats: np.ndarray  # (N, 8, F)
    dw: np.ndarray  # (N, 8, 3) weight derivative w.r.t. normalized coords


class VoxelGrid:
    """One 3D hash-grid level."""

    def __init__(self, resolution, features, hash_exponent, rng):
        self.resolution = int(resolution)
        self.features = int(features)
        self.hash_exponent = int(hash_exponent)
        self.axis_pair = "xyz"
        cap = 1 << hash_exponent
        n_vertices = self.resolution ** 3
        self.table_len = min(n_vertices, cap)
        self.hashed = n_vertices > cap
        self.table = rng.uniform(-1e-4, 1e-4, size=(self.table_len, self.features))
        self.grad = np.zeros_like(self.table)

    def vertex_index(self, ijk: np.ndarray) -> np.ndarray:
        if self.hashed:
            return hash3d(ijk, self.hash_exponent)
        r = self.resolution
        return (
            ijk[..., 0].astype(np.int64) * r * r
            + ijk[..., 1].astype(np.int64) * r
            + ijk[..., 2].astype(np.int64)
        )


_VOXEL_OFFS = np.array(
    [[a, b, c] for c in (0, 1) for b in (0, 1) for a in (0, 1)], dtype=np.int64
)


class HashGrid3D(_EncodingBase):
    """Baseline: multi-level 3D hash grid with trilinear interpolation."""

    variant = "hash_grid_3d"

    def __init__(self, config: EncodingConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        F = config.features_per_level
        cap = config.table_capacity
        resolutions = config.level_resolutions()
        self._res = np.asarray(resolutions, dtype=np.int64)
        caps = [min(r ** 3, cap) for r in resolutions]
        self._hashed = np.asarray([r ** 3 > cap for r in resolutions], dtype=np.bool_)
        self._caps = np.asarray(caps, dtype=np.int64)
        self._offsets = np.zeros(len(resolutions), dtype=np.int64)
        total = 0
        for l, c in enumerate(caps):
            self._offsets[l] = total
            total += c
        self.storage = rng.uniform(-1e-4, 1e-4, size=(total, F))
        self.storage_grad = np.zeros_like(self.storage)
        self.levels = []
        for l, res in enumerate(resolutions):
            o = self._offsets[l]
            grid = VoxelGrid.__new__(VoxelGrid)
            grid.resolution = int(res)
            grid.features = F
            grid.hash_exponent = config.hash_exponent
            grid.axis_pair = "xyz"
            grid.table_len = caps[l]
            grid.hashed = bool(self._hashed[l])
            grid.table = self.storage[o:o + caps[l]]
            grid.grad = self.storage_grad[o:o + caps[l]]
            self.levels.append(grid)
        self.feature_dim = config.levels * F

    def named_tables(self):
        yield "tables", self.storage, self.storage_grad

    def _levels_for_count(self):
        return [[g] for g in self.levels]

    def encode(self, points: np.ndarray):
        q, dq_dp = self._normalize(points)
        n = q.shape[0]
        F = self.config.features_per_level
        if _kernels.HAVE_NUMBA:
            out = np.zeros((n, self.feature_dim))
            _kernels.voxel_forward(q, self._res, self._hashed, self._offsets,
                                   self._caps, self.storage, F, out)
            return out, EncodeContext(owner=self, n_points=n, plane_ctxs=None,
                                      dq_dp=dq_dp, q=q)
        out = np.empty((n, self.feature_dim))
        plane_ctxs = []
        col = 0
        for grid in self.levels:
            res = grid.resolution
            x = np.clip(q, 0.0, 1.0) * (res - 1)
            i = np.minimum(np.floor(x).astype(np.int64), res - 2)
            f = x - i
            corners = i[:, None, :] + _VOXEL_OFFS  # (N, 8, 3)
            idx = grid.vertex_index(corners)
            one_m = 1.0 - f
            parts = np.where(_VOXEL_OFFS[None, :, :] == 1, f[:, None, :], one_m[:, None, :])
            w = parts.prod(axis=-1)  # (N, 8)
            sign = np.where(_VOXEL_OFFS[None, :, :] == 1, 1.0, -1.0)
            dw = np.empty((n, 8, 3))
            for ax in range(3):
                others = [a for a in range(3) if a != ax]
                dw[:, :, ax] = sign[:, :, ax] * parts[:, :, others].prod(axis=-1) * (res - 1)
            feats = grid.table[idx]
            out[:, col:col + F] = np.einsum("nc,ncf->nf", w, feats)
            plane_ctxs.append(_VoxelLookupCtx(idx=idx, w=w, feats=feats, dw=dw))
            col += F
        return out, EncodeContext(owner=self, n_points=n, plane_ctxs=plane_ctxs,
                                  dq_dp=dq_dp, q=q)

    def encode_backward(self, ctx: EncodeContext, upstream: np.ndarray,
                        accumulate: bool = True) -> np.ndarray:
        if ctx.owner is not self:
            raise ValueError("gradient record does not belong to this encoding")
        upstream = np.ascontiguousarray(upstream, dtype=np.float64)
        if upstream.shape != (ctx.n_points, self.feature_dim):
            raise ValueError("upstream gradient shape mismatch")
        F = self.config.features_per_level
        if ctx.plane_ctxs is None:
            dq = np.zeros((ctx.n_points, 3))
            if accumulate and _kernels.num_threads() == 1:
                _kernels.voxel_backward_fused(ctx.q, self._res, self._hashed,
                                              self._offsets, self._caps,
                                              self.storage, F, upstream,
                                              self.storage_grad, dq)
                return dq * ctx.dq_dp
            _kernels.voxel_position_grad(ctx.q, self._res, self._hashed,
                                         self._offsets, self._caps,
                                         self.storage, F, upstream, dq)
            if accumulate:
                _kernels.voxel_scatter(ctx.q, self._res, self._hashed,
                                       self._offsets, self._caps, F, upstream,
                                       self.storage_grad, _kernels.num_threads())
            return dq * ctx.dq_dp
        dq = np.zeros((ctx.n_points, 3))
        for l, grid in enumerate(self.levels):
            g = upstream[:, l * F:(l + 1) * F]
            vc = ctx.plane_ctxs[l]
            if accumulate:
                contrib = vc.w[..., None] * g[:, None, :]
                flat_idx = vc.idx.ravel()
                for f in range(F):
                    grid.grad[:, f] += np.bincount(
                        flat_idx, weights=contrib[..., f].ravel(), minlength=grid.table_len
                    )
            fg = np.einsum("ncf,nf->nc", vc.feats, g)  # (N, 8)
            dq += np.einsum("nc,nca->na", fg, vc.dw)
        return dq * ctx.dq_dp


def make_encoding(variant: str, config: EncodingConfig) -> _EncodingBase:
    backends = {
        "sparse_triplane": SparseTriplane,
        "dense_triplane": DenseTriplane,
        "hash_grid_3d": HashGrid3D,
    }
    if variant not in backends:
        raise ValueError(f"unknown encoding variant {variant!r}")
    return backends[variant](config)


def analytic_param_count(config: EncodingConfig, variant: str) -> ParamCount:
    """Parameter budget of a backend computed without allocating it.

    Matches the instantiated backend's param_count() exactly.
    """
    cap = config.table_capacity
    F = config.features_per_level
    levels = []
    for l, r in enumerate(config.level_resolutions()):
        if variant == "sparse_triplane":
            entries = 3 * min(r * r, cap)
        elif variant == "dense_triplane":
            entries = 3 * r * r
        elif variant == "hash_grid_3d":
            entries = min(r ** 3, cap)
        else:
            raise ValueError(f"unknown encoding variant {variant!r}")
        levels.append({"level": l, "resolution": r, "entries": entries,
                       "bytes": entries * F * BYTES_PER_FEATURE})
    return ParamCount(levels=levels,
                      total_entries=sum(lv["entries"] for lv in levels),
                      total_bytes=sum(lv["bytes"] for lv in levels))


def hash_bucket_load(resolution: int, T: int, warn_above: int = 16) -> int:
    """Maximum bucket occupancy when hashing every vertex of a square grid.

    Distribution sanity check; logs a warning above the threshold.
    """
    i, j = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    ij = np.stack([i.ravel(), j.ravel()], axis=-1)
    counts = np.bincount(hash2d(ij, T), minlength=1 << T)
    load = int(counts.max())
    if load > warn_above:
        log.warning("hash bucket load %d exceeds %d for resolution %d, T=%d",
                    load, warn_above, resolution, T)
    return load
