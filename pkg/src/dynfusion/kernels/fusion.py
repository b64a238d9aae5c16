"""Voxel-centric projective integration, free-space carving and block
allocation by ray traversal.

Every kernel takes the world->camera transform (R, t) and the packed
intrinsics (fx, fy, cx, cy, width, height). A voxel projects to the
nearest integer pixel.
"""

from __future__ import annotations

import numpy as np

from .._backend import njit, use_numba


@njit
def _block_visible(bx, by, bz, L, R, t, K, z_near, z_far):
    half = 0.5 * L
    cx = bx * L + half
    cy = by * L + half
    cz = bz * L + half
    x = R[0, 0] * cx + R[0, 1] * cy + R[0, 2] * cz + t[0]
    y = R[1, 0] * cx + R[1, 1] * cy + R[1, 2] * cz + t[1]
    z = R[2, 0] * cx + R[2, 1] * cy + R[2, 2] * cz + t[2]
    r = 1.7320508075688772 * half
    if z + r < z_near or z - r > z_far:
        return False
    fx, fy, ppx, ppy, w, h = K[0], K[1], K[2], K[3], K[4], K[5]
    umin = -1.0
    umax = w
    vmin = -1.0
    vmax = h
    # signed distances to the four side planes through the optical centre
    if (fx * x + (ppx - umin) * z) / np.sqrt(fx * fx + (ppx - umin) ** 2) < -r:
        return False
    if ((umax - ppx) * z - fx * x) / np.sqrt(fx * fx + (umax - ppx) ** 2) < -r:
        return False
    if (fy * y + (ppy - vmin) * z) / np.sqrt(fy * fy + (ppy - vmin) ** 2) < -r:
        return False
    if ((vmax - ppy) * z - fy * y) / np.sqrt(fy * fy + (vmax - ppy) ** 2) < -r:
        return False
    return True


@njit
def _fuse_nb(block_coords, sdf, weight, color, B, s, R, t, K, depth, rgb, mask,
             tau, min_depth, max_depth, max_weight, carve_clip, carve_weight, mode):
    """mode 0 integrates the truncation band, mode 1 carves free space.

    Returns the number of voxels touched.
    """
    h = depth.shape[0]
    w = depth.shape[1]
    fx, fy, ppx, ppy = K[0], K[1], K[2], K[3]
    L = B * s
    if mode == 0:
        z_near = min_depth - tau
        z_far = max_depth + tau
    else:
        z_near = min_depth
        z_far = carve_clip
    touched = 0
    for b in range(block_coords.shape[0]):
        bx = block_coords[b, 0]
        by = block_coords[b, 1]
        bz = block_coords[b, 2]
        if not _block_visible(bx, by, bz, L, R, t, K, z_near, z_far):
            continue
        for lz in range(B):
            for ly in range(B):
                for lx in range(B):
                    px = (bx * B + lx) * s
                    py = (by * B + ly) * s
                    pz = (bz * B + lz) * s
                    z = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
                    if z <= 0.0:
                        continue
                    x = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
                    y = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
                    u = int(np.floor(fx * x / z + ppx + 0.5))
                    v = int(np.floor(fy * y / z + ppy + 0.5))
                    if u < 0 or u >= w or v < 0 or v >= h:
                        continue
                    D = depth[v, u]
                    if not D > 0.0:
                        continue
                    i = lx + B * (ly + B * lz)
                    wv = np.float64(weight[b, i])
                    if mode == 0:
                        if mask[v, u] or D < min_depth or D > max_depth:
                            continue
                        d = D - z
                        if d <= -tau or d > tau:
                            continue
                        wn = wv + 1.0
                        sdf[b, i] = (wv * sdf[b, i] + d) / wn
                        for c in range(3):
                            color[b, i, c] = np.uint8(np.floor((wv * color[b, i, c] + rgb[v, u, c]) / wn + 0.5))
                        weight[b, i] = np.uint8(min(wn, max_weight))
                    else:
                        if z < min_depth or z >= D - tau or z >= carve_clip:
                            continue
                        wn = wv + carve_weight
                        sdf[b, i] = (wv * sdf[b, i] + carve_weight * tau) / wn
                        weight[b, i] = np.uint8(min(wn, max_weight))
                    touched += 1
    return touched


def _visible_np(block_coords, L, R, t, K, z_near, z_far):
    c = (block_coords.astype(np.float64) + 0.5) * L
    p = c @ R.T + t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = np.sqrt(3.0) * 0.5 * L
    fx, fy, ppx, ppy, w, h = K
    ok = (z + r >= z_near) & (z - r <= z_far)
    umin, umax, vmin, vmax = -1.0, w, -1.0, h
    ok &= (fx * x + (ppx - umin) * z) / np.hypot(fx, ppx - umin) >= -r
    ok &= ((umax - ppx) * z - fx * x) / np.hypot(fx, umax - ppx) >= -r
    ok &= (fy * y + (ppy - vmin) * z) / np.hypot(fy, ppy - vmin) >= -r
    ok &= ((vmax - ppy) * z - fy * y) / np.hypot(fy, vmax - ppy) >= -r
    return np.flatnonzero(ok)


def _local_grid(B):
    lz, ly, lx = np.meshgrid(np.arange(B), np.arange(B), np.arange(B), indexing="ij")
    return np.stack([lx.ravel(), ly.ravel(), lz.ravel()], axis=1)


def _fuse_np(block_coords, sdf, weight, color, B, s, R, t, K, depth, rgb, mask,
             tau, min_depth, max_depth, max_weight, carve_clip, carve_weight, mode):
    L = B * s
    if mode == 0:
        blocks = _visible_np(block_coords, L, R, t, K, min_depth - tau, max_depth + tau)
    else:
        blocks = _visible_np(block_coords, L, R, t, K, min_depth, carve_clip)
    if blocks.size == 0:
        return 0
    h, w = depth.shape
    fx, fy, ppx, ppy = K[:4]
    local = _local_grid(B)
    vox = (block_coords[blocks, None, :].astype(np.int64) * B + local[None]) * s  # (nb, B^3, 3)
    # same operation order as the compiled kernel so rounding ties agree
    px, py, pz = vox[..., 0], vox[..., 1], vox[..., 2]
    x = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
    y = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
    z = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
    zs = np.where(z > 0, z, 1.0)
    u = np.floor(fx * x / zs + ppx + 0.5)
    v = np.floor(fy * y / zs + ppy + 0.5)
    ok = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    ui = np.where(ok, u, 0).astype(np.int64)
    vi = np.where(ok, v, 0).astype(np.int64)
    D = depth[vi, ui].astype(np.float64)
    ok &= D > 0
    bi = np.broadcast_to(blocks[:, None], z.shape)
    ii = np.broadcast_to(np.arange(B**3)[None], z.shape)
    if mode == 0:
        d = D - z
        ok &= ~mask[vi, ui] & (D >= min_depth) & (D <= max_depth) & (d > -tau) & (d <= tau)
        b_, i_ = bi[ok], ii[ok]
        wv = weight[b_, i_].astype(np.float64)
        wn = wv + 1.0
        sdf[b_, i_] = ((wv * sdf[b_, i_] + d[ok]) / wn).astype(np.float32)
        col = rgb[vi[ok], ui[ok]].astype(np.float64)
        color[b_, i_] = np.floor((wv[:, None] * color[b_, i_] + col) / wn[:, None] + 0.5).astype(np.uint8)
        weight[b_, i_] = np.minimum(wn, max_weight).astype(np.uint8)
    else:
        ok &= (z >= min_depth) & (z < D - tau) & (z < carve_clip)
        b_, i_ = bi[ok], ii[ok]
        wv = weight[b_, i_].astype(np.float64)
        wn = wv + carve_weight
        sdf[b_, i_] = ((wv * sdf[b_, i_] + carve_weight * tau) / wn).astype(np.float32)
        weight[b_, i_] = np.minimum(wn, max_weight).astype(np.uint8)
    return int(ok.sum())


def fuse(block_coords, sdf, weight, color, B, s, R, t, K, depth, rgb, mask,
         tau, min_depth, max_depth, max_weight, carve_clip, carve_weight, mode):
    args = (np.ascontiguousarray(block_coords, dtype=np.int32), sdf, weight, color, int(B), float(s),
            np.ascontiguousarray(R, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(K, dtype=np.float64), np.ascontiguousarray(depth, dtype=np.float32),
            np.ascontiguousarray(rgb, dtype=np.uint8), np.ascontiguousarray(mask, dtype=np.bool_),
            float(tau), float(min_depth), float(max_depth), float(max_weight), float(carve_clip),
            float(carve_weight), int(mode))
    if use_numba():
        return _fuse_nb(*args)
    return _fuse_np(*args)


# ---------------------------------------------------------------- allocation


@njit
def _walk_nb(a, b, L, out, n):
    """Append blocks pierced by segment a->b (half-open cells) to out[n:]."""
    cell = np.empty(3, dtype=np.int64)
    end = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    for k in range(3):
        cell[k] = np.int64(np.floor(a[k] / L))
        end[k] = np.int64(np.floor(b[k] / L))
        d = b[k] - a[k]
        if d > 0:
            step[k] = 1
            tmax[k] = ((cell[k] + 1) * L - a[k]) / d
            tdelta[k] = L / d
        elif d < 0:
            step[k] = -1
            tmax[k] = (cell[k] * L - a[k]) / d
            tdelta[k] = -L / d
        else:
            step[k] = 0
            tmax[k] = np.inf
            tdelta[k] = np.inf
    limit = abs(end[0] - cell[0]) + abs(end[1] - cell[1]) + abs(end[2] - cell[2]) + 1
    for _ in range(limit):
        out[n, 0] = cell[0]
        out[n, 1] = cell[1]
        out[n, 2] = cell[2]
        n += 1
        if cell[0] == end[0] and cell[1] == end[1] and cell[2] == end[2]:
            break
        k = 0
        if tmax[1] < tmax[k]:
            k = 1
        if tmax[2] < tmax[k]:
            k = 2
        if tmax[k] > 1.0:
            break
        cell[k] += step[k]
        tmax[k] += tdelta[k]
    return n


@njit
def _segments_nb(depth, mask, K, R, t, L, tau, min_depth, max_depth, carve_clip, stride, free):
    """Blocks along each valid pixel's band segment (free=False) or free-space
    segment (free=True). Returns an (M, 3) int32 array with repeats."""
    h, w = depth.shape
    fx, fy, ppx, ppy = K[0], K[1], K[2], K[3]
    # per-segment bound on visited cells
    max_len = (2.0 * tau if not free else carve_clip) * 2.0
    per = 3 * (int(max_len / L) + 2) + 1
    nrays = ((h + stride - 1) // stride) * ((w + stride - 1) // stride)
    out = np.empty((nrays * per, 3), dtype=np.int32)
    n = 0
    a = np.empty(3)
    bpt = np.empty(3)
    for v in range(0, h, stride):
        for u in range(0, w, stride):
            D = depth[v, u]
            if not D > 0.0:
                continue
            if free:
                z0 = min_depth
                z1 = min(D - tau, carve_clip)
            else:
                if mask[v, u] or D < min_depth or D > max_depth:
                    continue
                z0 = max(D - tau, 1e-6)
                z1 = D + tau
            if z1 <= z0:
                continue
            rx = (u - ppx) / fx
            ry = (v - ppy) / fy
            for k in range(3):
                a[k] = R[k, 0] * rx * z0 + R[k, 1] * ry * z0 + R[k, 2] * z0 + t[k]
                bpt[k] = R[k, 0] * rx * z1 + R[k, 1] * ry * z1 + R[k, 2] * z1 + t[k]
            n = _walk_nb(a, bpt, L, out, n)
    return out[:n]


def _walk_np(a, b, L):
    """All segments a[i]->b[i] advanced one cell per iteration; returns the
    visited cells of every segment, stacked."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    cell = np.floor(a / L).astype(np.int64)
    end = np.floor(b / L).astype(np.int64)
    d = b - a
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tmax = np.where(d > 0, ((cell + 1) * L - a) / d, np.where(d < 0, (cell * L - a) / d, np.inf))
        tdelta = np.where(d != 0, L / np.abs(d), np.inf)
    out = [cell.copy()]
    active = np.arange(len(a))
    while active.size:
        c, e, tm = cell[active], end[active], tmax[active]
        k = np.argmin(tm, axis=1)
        tk = tm[np.arange(active.size), k]
        go = ~np.all(c == e, axis=1) & (tk <= 1.0)
        active, k = active[go], k[go]
        if not active.size:
            break
        cell[active, k] += step[active, k]
        tmax[active, k] += tdelta[active, k]
        out.append(cell[active].copy())
    return np.concatenate(out)


def _segments_np(depth, mask, K, R, t, L, tau, min_depth, max_depth, carve_clip, stride, free):
    fx, fy, ppx, ppy = K[:4]
    d = depth[::stride, ::stride].astype(np.float64)
    vs, us = np.mgrid[0 : depth.shape[0] : stride, 0 : depth.shape[1] : stride]
    if free:
        z0 = np.full_like(d, min_depth)
        z1 = np.minimum(d - tau, carve_clip)
        ok = d > 0
    else:
        z0 = np.maximum(d - tau, 1e-6)
        z1 = d + tau
        ok = (d > 0) & ~mask[::stride, ::stride] & (d >= min_depth) & (d <= max_depth)
    ok &= z1 > z0
    rays = np.stack([(us - ppx) / fx, (vs - ppy) / fy, np.ones_like(d)], axis=-1)[ok]
    a = (rays * z0[ok][:, None]) @ R.T + t
    b = (rays * z1[ok][:, None]) @ R.T + t
    if len(a) == 0:
        return np.zeros((0, 3), dtype=np.int32)
    return _walk_np(a, b, L).astype(np.int32)


def segment_blocks(depth, mask, K, R, t, L, tau, min_depth, max_depth, carve_clip, stride=1, free=False):
    args = (np.ascontiguousarray(depth, dtype=np.float32), np.ascontiguousarray(mask, dtype=np.bool_),
            np.ascontiguousarray(K, dtype=np.float64), np.ascontiguousarray(R, dtype=np.float64),
            np.ascontiguousarray(t, dtype=np.float64), float(L), float(tau), float(min_depth),
            float(max_depth), float(carve_clip), int(stride), bool(free))
    if use_numba():
        return _segments_nb(*args)
    return _segments_np(*args)
