"""Numba kernels for the hot encode / backward paths.

Determinism notes: forward and position-gradient kernels are parallel over
points with no shared writes. Table-gradient scatter uses per-thread
buffers over fixed point ranges with a fixed-order reduction, so results
are bit-stable across runs for a given thread count; the scatter falls back
to a serial kernel when the buffers would be too large.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard speedup, soft dep
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return deco

    prange = range

# axis pairs (xy, xz, yz) as index lookups
_AXA = np.array([0, 0, 1], dtype=np.int64)
_AXB = np.array([1, 2, 2], dtype=np.int64)

# private scatter buffers above this many table entries would thrash memory
SCATTER_BUFFER_LIMIT = 4_000_000


@njit(cache=True, inline="always")
def _hash2(i, j, mask):
    h = (np.uint32(i) * np.uint32(1)) ^ (np.uint32(j) * np.uint32(2654435761))
    return np.int64(h & mask)


@njit(cache=True, inline="always")
def _hash3(i, j, k, mask):
    h = (
        (np.uint32(i) * np.uint32(1))
        ^ (np.uint32(j) * np.uint32(2654435761))
        ^ (np.uint32(k) * np.uint32(805459861))
    )
    return np.int64(h & mask)


@njit(cache=True, parallel=True)
def triplane_forward(q, res, hashed, offsets, caps, table, F, out):
    """q: (N,3) in [0,1]; out: (N, 3*L*F) preallocated."""
    N = q.shape[0]
    L = res.shape[0]
    for n in prange(N):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            for pl in range(3):
                a = _AXA[pl]
                b = _AXB[pl]
                x = q[n, a] * rm1
                y = q[n, b] * rm1
                i = int(x)
                j = int(y)
                if i > r - 2:
                    i = r - 2
                if j > r - 2:
                    j = r - 2
                fx = x - i
                fy = y - j
                base = offsets[l, pl]
                for ca in range(2):
                    for cb in range(2):
                        ii = i + ca
                        jj = j + cb
                        if hashed[l]:
                            idx = base + _hash2(ii, jj, np.uint32(caps[l] - 1))
                        else:
                            idx = base + ii * r + jj
                        wa = fx if ca == 1 else 1.0 - fx
                        wb = fy if cb == 1 else 1.0 - fy
                        w = wa * wb
                        for f in range(F):
                            out[n, col + f] += w * table[idx, f]
                col += F


@njit(cache=True, parallel=True)
def triplane_position_grad(q, res, hashed, offsets, caps, table, F, upstream, dq):
    """Gradient of sum(upstream * features) w.r.t. normalized coords q."""
    N = q.shape[0]
    L = res.shape[0]
    for n in prange(N):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            for pl in range(3):
                a = _AXA[pl]
                b = _AXB[pl]
                x = q[n, a] * rm1
                y = q[n, b] * rm1
                i = int(x)
                j = int(y)
                if i > r - 2:
                    i = r - 2
                if j > r - 2:
                    j = r - 2
                fx = x - i
                fy = y - j
                base = offsets[l, pl]
                da = 0.0
                db = 0.0
                for ca in range(2):
                    for cb in range(2):
                        ii = i + ca
                        jj = j + cb
                        if hashed[l]:
                            idx = base + _hash2(ii, jj, np.uint32(caps[l] - 1))
                        else:
                            idx = base + ii * r + jj
                        fg = 0.0
                        for f in range(F):
                            fg += table[idx, f] * upstream[n, col + f]
                        wa = fx if ca == 1 else 1.0 - fx
                        wb = fy if cb == 1 else 1.0 - fy
                        dwa = 1.0 if ca == 1 else -1.0
                        dwb = 1.0 if cb == 1 else -1.0
                        da += dwa * wb * fg
                        db += wa * dwb * fg
                dq[n, a] += da * rm1
                dq[n, b] += db * rm1
                col += F


@njit(cache=True)
def _triplane_scatter_range(q, res, hashed, offsets, caps, F, upstream, grad, n0, n1):
    L = res.shape[0]
    for n in range(n0, n1):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            for pl in range(3):
                a = _AXA[pl]
                b = _AXB[pl]
                x = q[n, a] * rm1
                y = q[n, b] * rm1
                i = int(x)
                j = int(y)
                if i > r - 2:
                    i = r - 2
                if j > r - 2:
                    j = r - 2
                fx = x - i
                fy = y - j
                base = offsets[l, pl]
                for ca in range(2):
                    for cb in range(2):
                        ii = i + ca
                        jj = j + cb
                        if hashed[l]:
                            idx = base + _hash2(ii, jj, np.uint32(caps[l] - 1))
                        else:
                            idx = base + ii * r + jj
                        wa = fx if ca == 1 else 1.0 - fx
                        wb = fy if cb == 1 else 1.0 - fy
                        w = wa * wb
                        for f in range(F):
                            grad[idx, f] += w * upstream[n, col + f]
                col += F


@njit(cache=True, parallel=True)
def _triplane_scatter_buffered(q, res, hashed, offsets, caps, F, upstream, bufs, splits):
    for c in prange(splits.shape[0] - 1):
        _triplane_scatter_range(q, res, hashed, offsets, caps, F, upstream,
                                bufs[c], splits[c], splits[c + 1])


def triplane_scatter(q, res, hashed, offsets, caps, F, upstream, grad, n_threads):
    total = grad.shape[0]
    n = q.shape[0]
    if total > SCATTER_BUFFER_LIMIT or n_threads <= 1 or n < 4 * n_threads:
        _triplane_scatter_range(q, res, hashed, offsets, caps, F, upstream, grad, 0, n)
        return
    splits = np.linspace(0, n, n_threads + 1).astype(np.int64)
    bufs = np.zeros((n_threads, total, F))
    _triplane_scatter_buffered(q, res, hashed, offsets, caps, F, upstream, bufs, splits)
    grad += bufs.sum(axis=0)


@njit(cache=True, parallel=True)
def voxel_forward(q, res, hashed, offsets, caps, table, F, out):
    """3D hash-grid forward; out: (N, L*F)."""
    N = q.shape[0]
    L = res.shape[0]
    for n in prange(N):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            base = offsets[l]
            x = q[n, 0] * rm1
            y = q[n, 1] * rm1
            z = q[n, 2] * rm1
            i = min(int(x), r - 2)
            j = min(int(y), r - 2)
            k = min(int(z), r - 2)
            fx = x - i
            fy = y - j
            fz = z - k
            for ca in range(2):
                for cb in range(2):
                    for cc in range(2):
                        ii = i + ca
                        jj = j + cb
                        kk = k + cc
                        if hashed[l]:
                            idx = base + _hash3(ii, jj, kk, np.uint32(caps[l] - 1))
                        else:
                            idx = base + (ii * r + jj) * r + kk
                        w = (fx if ca else 1.0 - fx) * (fy if cb else 1.0 - fy) * (fz if cc else 1.0 - fz)
                        for f in range(F):
                            out[n, col + f] += w * table[idx, f]
            col += F


@njit(cache=True, parallel=True)
def voxel_position_grad(q, res, hashed, offsets, caps, table, F, upstream, dq):
    N = q.shape[0]
    L = res.shape[0]
    for n in prange(N):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            base = offsets[l]
            x = q[n, 0] * rm1
            y = q[n, 1] * rm1
            z = q[n, 2] * rm1
            i = min(int(x), r - 2)
            j = min(int(y), r - 2)
            k = min(int(z), r - 2)
            fx = x - i
            fy = y - j
            fz = z - k
            for ca in range(2):
                for cb in range(2):
                    for cc in range(2):
                        ii = i + ca
                        jj = j + cb
                        kk = k + cc
                        if hashed[l]:
                            idx = base + _hash3(ii, jj, kk, np.uint32(caps[l] - 1))
                        else:
                            idx = base + (ii * r + jj) * r + kk
                        fg = 0.0
                        for f in range(F):
                            fg += table[idx, f] * upstream[n, col + f]
                        wa = fx if ca else 1.0 - fx
                        wb = fy if cb else 1.0 - fy
                        wc = fz if cc else 1.0 - fz
                        sa = 1.0 if ca else -1.0
                        sb = 1.0 if cb else -1.0
                        sc = 1.0 if cc else -1.0
                        dq[n, 0] += sa * wb * wc * fg * rm1
                        dq[n, 1] += wa * sb * wc * fg * rm1
                        dq[n, 2] += wa * wb * sc * fg * rm1
            col += F


@njit(cache=True)
def _voxel_scatter_range(q, res, hashed, offsets, caps, F, upstream, grad, n0, n1):
    L = res.shape[0]
    for n in range(n0, n1):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            base = offsets[l]
            x = q[n, 0] * rm1
            y = q[n, 1] * rm1
            z = q[n, 2] * rm1
            i = min(int(x), r - 2)
            j = min(int(y), r - 2)
            k = min(int(z), r - 2)
            fx = x - i
            fy = y - j
            fz = z - k
            for ca in range(2):
                for cb in range(2):
                    for cc in range(2):
                        ii = i + ca
                        jj = j + cb
                        kk = k + cc
                        if hashed[l]:
                            idx = base + _hash3(ii, jj, kk, np.uint32(caps[l] - 1))
                        else:
                            idx = base + (ii * r + jj) * r + kk
                        w = (fx if ca else 1.0 - fx) * (fy if cb else 1.0 - fy) * (fz if cc else 1.0 - fz)
                        for f in range(F):
                            grad[idx, f] += w * upstream[n, col + f]
            col += F


@njit(cache=True, parallel=True)
def _voxel_scatter_buffered(q, res, hashed, offsets, caps, F, upstream, bufs, splits):
    for c in prange(splits.shape[0] - 1):
        _voxel_scatter_range(q, res, hashed, offsets, caps, F, upstream,
                             bufs[c], splits[c], splits[c + 1])


def voxel_scatter(q, res, hashed, offsets, caps, F, upstream, grad, n_threads):
    total = grad.shape[0]
    n = q.shape[0]
    if total > SCATTER_BUFFER_LIMIT or n_threads <= 1 or n < 4 * n_threads:
        _voxel_scatter_range(q, res, hashed, offsets, caps, F, upstream, grad, 0, n)
        return
    splits = np.linspace(0, n, n_threads + 1).astype(np.int64)
    bufs = np.zeros((n_threads, total, F))
    _voxel_scatter_buffered(q, res, hashed, offsets, caps, F, upstream, bufs, splits)
    grad += bufs.sum(axis=0)


def num_threads() -> int:
    if not HAVE_NUMBA:
        return 1
    return numba.get_num_threads()


@njit(cache=True)
def triplane_backward_fused(q, res, hashed, offsets, caps, table, F, upstream,
                            grad, dq):
    """Single-pass serial backward: table-gradient scatter + position grad."""
    N = q.shape[0]
    L = res.shape[0]
    for n in range(N):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            for pl in range(3):
                a = _AXA[pl]
                b = _AXB[pl]
                x = q[n, a] * rm1
                y = q[n, b] * rm1
                i = int(x)
                j = int(y)
                if i > r - 2:
                    i = r - 2
                if j > r - 2:
                    j = r - 2
                fx = x - i
                fy = y - j
                base = offsets[l, pl]
                da = 0.0
                db = 0.0
                for ca in range(2):
                    for cb in range(2):
                        ii = i + ca
                        jj = j + cb
                        if hashed[l]:
                            idx = base + _hash2(ii, jj, np.uint32(caps[l] - 1))
                        else:
                            idx = base + ii * r + jj
                        wa = fx if ca == 1 else 1.0 - fx
                        wb = fy if cb == 1 else 1.0 - fy
                        w = wa * wb
                        fg = 0.0
                        for f in range(F):
                            u = upstream[n, col + f]
                            grad[idx, f] += w * u
                            fg += table[idx, f] * u
                        dwa = 1.0 if ca == 1 else -1.0
                        dwb = 1.0 if cb == 1 else -1.0
                        da += dwa * wb * fg
                        db += wa * dwb * fg
                dq[n, a] += da * rm1
                dq[n, b] += db * rm1
                col += F


@njit(cache=True)
def voxel_backward_fused(q, res, hashed, offsets, caps, table, F, upstream,
                         grad, dq):
    N = q.shape[0]
    L = res.shape[0]
    for n in range(N):
        col = 0
        for l in range(L):
            r = res[l]
            rm1 = r - 1
            base = offsets[l]
            x = q[n, 0] * rm1
            y = q[n, 1] * rm1
            z = q[n, 2] * rm1
            i = min(int(x), r - 2)
            j = min(int(y), r - 2)
            k = min(int(z), r - 2)
            fx = x - i
            fy = y - j
            fz = z - k
            for ca in range(2):
                for cb in range(2):
                    for cc in range(2):
                        ii = i + ca
                        jj = j + cb
                        kk = k + cc
                        if hashed[l]:
                            idx = base + _hash3(ii, jj, kk, np.uint32(caps[l] - 1))
                        else:
                            idx = base + (ii * r + jj) * r + kk
                        wa = fx if ca else 1.0 - fx
                        wb = fy if cb else 1.0 - fy
                        wc = fz if cc else 1.0 - fz
                        w = wa * wb * wc
                        fg = 0.0
                        for f in range(F):
                            u = upstream[n, col + f]
                            grad[idx, f] += w * u
                            fg += table[idx, f] * u
                        sa = 1.0 if ca else -1.0
                        sb = 1.0 if cb else -1.0
                        sc = 1.0 if cc else -1.0
                        dq[n, 0] += sa * wb * wc * fg * rm1
                        dq[n, 1] += wa * sb * wc * fg * rm1
                        dq[n, 2] += wa * wb * sc * fg * rm1
            col += F
