"""Trilinear sampling of the hashed volume and ray marching.

Voxel (i, j, k) sits at world position (i, j, k) * voxel_size. A sample is
valid only when all 8 surrounding voxels are allocated and observed
(weight > 0). Gradients are the exact derivatives of the trilinear
interpolant, in world units.
"""

from __future__ import annotations

import numpy as np

from .._backend import njit, use_numba
from .hashing import _find_nb, _lookup_np

LUMA = np.array([0.2126, 0.7152, 0.0722])
_SENTINEL = 1 << 40


@njit
def _voxel_nb(keys, vals, B, i, j, k, cache):
    bx = i // B
    by = j // B
    bz = k // B
    if cache[0] == bx and cache[1] == by and cache[2] == bz:
        blk = cache[3]
    else:
        blk = _find_nb(keys, vals, bx, by, bz)
        cache[0] = bx
        cache[1] = by
        cache[2] = bz
        cache[3] = blk
    if blk < 0:
        return -1, -1
    return blk, (i - bx * B) + B * ((j - by * B) + B * (k - bz * B))


@njit
def _trilinear_nb(keys, vals, sdf, weight, color, B, s, px, py, pz, want_color, out, cache):
    """Fill out[0:8] = (sdf, intensity, dsdf/dx.., dI/dx..); returns validity."""
    gx = px / s
    gy = py / s
    gz = pz / s
    ix = np.int64(np.floor(gx))
    iy = np.int64(np.floor(gy))
    iz = np.int64(np.floor(gz))
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    for m in range(8):
        out[m] = 0.0
    for c in range(8):
        dx = c & 1
        dy = (c >> 1) & 1
        dz = (c >> 2) & 1
        blk, v = _voxel_nb(keys, vals, B, ix + dx, iy + dy, iz + dz, cache)
        if blk < 0:
            return False
        if weight[blk, v] == 0:
            return False
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        wz = fz if dz else 1.0 - fz
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        sz = 1.0 if dz else -1.0
        val = np.float64(sdf[blk, v])
        out[0] += wx * wy * wz * val
        out[2] += sx * wy * wz * val
        out[3] += wx * sy * wz * val
        out[4] += wx * wy * sz * val
        if want_color:
            it = 0.2126 * color[blk, v, 0] + 0.7152 * color[blk, v, 1] + 0.0722 * color[blk, v, 2]
            out[1] += wx * wy * wz * it
            out[5] += sx * wy * wz * it
            out[6] += wx * sy * wz * it
            out[7] += wx * wy * sz * it
    for m in range(2, 8):
        out[m] /= s
    return True


@njit
def _sample_nb(keys, vals, sdf, weight, color, B, s, points, want_color):
    n = points.shape[0]
    res = np.zeros((n, 8))
    valid = np.zeros(n, dtype=np.bool_)
    out = np.zeros(8)
    cache = np.full(4, _SENTINEL, dtype=np.int64)
    for i in range(n):
        if _trilinear_nb(keys, vals, sdf, weight, color, B, s,
                         points[i, 0], points[i, 1], points[i, 2], want_color, out, cache):
            valid[i] = True
            for m in range(8):
                res[i, m] = out[m]
    return res, valid


def _gather_np(keys, vals, B, vox):
    """(M, 3) voxel coords -> (block index, voxel offset); block -1 if absent."""
    blocks = np.floor_divide(vox, B)
    local = vox - blocks * B
    blk = _lookup_np(keys, vals, blocks.astype(np.int32))
    off = local[:, 0] + B * (local[:, 1] + B * local[:, 2])
    return blk, off


def _sample_np(keys, vals, sdf, weight, color, B, s, points, want_color):
    n = points.shape[0]
    g = points / s
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    corners = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
    vox = (i0[:, None, :] + corners[None]).reshape(-1, 3)
    blk, off = _gather_np(keys, vals, B, vox)
    ok = blk >= 0
    safe_blk = np.where(ok, blk, 0)
    safe_off = np.where(ok, off, 0)
    ok &= weight[safe_blk, safe_off] > 0
    valid = ok.reshape(n, 8).all(axis=1)

    val = sdf[safe_blk, safe_off].astype(np.float64).reshape(n, 8)
    w = np.where(corners[None], f[:, None, :], 1.0 - f[:, None, :])  # (n, 8, 3)
    sgn = np.where(corners, 1.0, -1.0)[None]  # (1, 8, 3)
    wt = w.prod(axis=2)
    dwx = sgn[..., 0] * w[..., 1] * w[..., 2]
    dwy = w[..., 0] * sgn[..., 1] * w[..., 2]
    dwz = w[..., 0] * w[..., 1] * sgn[..., 2]
    res = np.zeros((n, 8))
    res[:, 0] = (wt * val).sum(1)
    res[:, 2] = (dwx * val).sum(1) / s
    res[:, 3] = (dwy * val).sum(1) / s
    res[:, 4] = (dwz * val).sum(1) / s
    if want_color:
        it = (color[safe_blk, safe_off].astype(np.float64) @ LUMA).reshape(n, 8)
        res[:, 1] = (wt * it).sum(1)
        res[:, 5] = (dwx * it).sum(1) / s
        res[:, 6] = (dwy * it).sum(1) / s
        res[:, 7] = (dwz * it).sum(1) / s
    res[~valid] = 0.0
    return res, valid


def sample(keys, vals, sdf, weight, color, B, s, points, want_color=True):
    """Returns ((N, 8) [sdf, I, dsdf(3), dI(3)], (N,) valid)."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if use_numba():
        return _sample_nb(keys, vals, sdf, weight, color, B, float(s), points, bool(want_color))
    return _sample_np(keys, vals, sdf, weight, color, B, float(s), points, bool(want_color))


@njit
def _raymarch_nb(keys, vals, sdf, weight, color, B, s, R, t, rays, z_min, z_max, step, n_bisect):
    h, w = rays.shape[0], rays.shape[1]
    depth = np.zeros((h, w), dtype=np.float32)
    out = np.zeros(8)
    cache = np.full(4, _SENTINEL, dtype=np.int64)
    for v in range(h):
        for u in range(w):
            dx = R[0, 0] * rays[v, u, 0] + R[0, 1] * rays[v, u, 1] + R[0, 2] * rays[v, u, 2]
            dy = R[1, 0] * rays[v, u, 0] + R[1, 1] * rays[v, u, 1] + R[1, 2] * rays[v, u, 2]
            dz = R[2, 0] * rays[v, u, 0] + R[2, 1] * rays[v, u, 1] + R[2, 2] * rays[v, u, 2]
            prev_ok = False
            prev_z = 0.0
            prev_f = 0.0
            z = z_min
            while z <= z_max:
                ok = _trilinear_nb(keys, vals, sdf, weight, color, B, s,
                                   t[0] + dx * z, t[1] + dy * z, t[2] + dz * z, False, out, cache)
                f = out[0]
                if ok and prev_ok and prev_f > 0.0 and f <= 0.0:
                    lo = prev_z
                    hi = z
                    flo = prev_f
                    fhi = f
                    for _ in range(n_bisect):
                        mid = 0.5 * (lo + hi)
                        okm = _trilinear_nb(keys, vals, sdf, weight, color, B, s,
                                            t[0] + dx * mid, t[1] + dy * mid, t[2] + dz * mid,
                                            False, out, cache)
                        if not okm:
                            break
                        if out[0] > 0.0:
                            lo = mid
                            flo = out[0]
                        else:
                            hi = mid
                            fhi = out[0]
                    # final linear step inside the bracket
                    if flo - fhi > 0.0:
                        depth[v, u] = lo + (hi - lo) * flo / (flo - fhi)
                    else:
                        depth[v, u] = 0.5 * (lo + hi)
                    break
                prev_ok = ok
                prev_z = z
                prev_f = f
                z += step
    return depth


def _raymarch_np(keys, vals, sdf, weight, color, B, s, R, t, rays, z_min, z_max, step, n_bisect):
    h, w = rays.shape[:2]
    dirs = rays.reshape(-1, 3) @ R.T
    n = dirs.shape[0]
    depth = np.zeros(n)
    active = np.ones(n, dtype=bool)
    prev_ok = np.zeros(n, dtype=bool)
    prev_f = np.zeros(n)
    lo = np.zeros(n)
    hi = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    z = z_min
    z_prev = z_min
    while z <= z_max and active.any():
        idx = np.flatnonzero(active)
        res, ok = _sample_np(keys, vals, sdf, weight, color, B, s, t + dirs[idx] * z, False)
        f = res[:, 0]
        hit = ok & prev_ok[idx] & (prev_f[idx] > 0) & (f <= 0)
        hi_idx = idx[hit]
        lo[hi_idx] = z_prev
        hi[hi_idx] = z
        found[hi_idx] = True
        active[hi_idx] = False
        prev_ok[idx] = ok
        prev_f[idx] = f
        z_prev = z
        z += step
    idx = np.flatnonzero(found)
    if idx.size:
        a, b = lo[idx], hi[idx]
        fa = _sample_np(keys, vals, sdf, weight, color, B, s, t + dirs[idx] * a[:, None], False)[0][:, 0]
        fb = _sample_np(keys, vals, sdf, weight, color, B, s, t + dirs[idx] * b[:, None], False)[0][:, 0]
        live = np.ones(idx.size, dtype=bool)
        for _ in range(n_bisect):
            mid = 0.5 * (a + b)
            r, okm = _sample_np(keys, vals, sdf, weight, color, B, s, t + dirs[idx] * mid[:, None], False)
            fm = r[:, 0]
            live &= okm
            pos = (fm > 0) & live
            neg = (fm <= 0) & live
            a = np.where(pos, mid, a)
            fa = np.where(pos, fm, fa)
            b = np.where(neg, mid, b)
            fb = np.where(neg, fm, fb)
        denom = fa - fb
        safe = np.where(denom > 0, denom, 1.0)
        depth[idx] = np.where(denom > 0, a + (b - a) * fa / safe, 0.5 * (a + b))
    return depth.reshape(h, w).astype(np.float32)


def raymarch(keys, vals, sdf, weight, color, B, s, R, t, rays, z_min, z_max, step, n_bisect=8):
    """Depth (along camera z) of the first +/- zero crossing per pixel, 0 if none."""
    args = (keys, vals, sdf, weight, color, B, float(s),
            np.ascontiguousarray(R, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(rays, dtype=np.float64), float(z_min), float(z_max), float(step), int(n_bisect))
    if use_numba():
        return _raymarch_nb(*args)
    return _raymarch_np(*args)
