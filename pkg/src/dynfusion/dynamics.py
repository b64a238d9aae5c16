"""Dynamic-pixel masks from registration residuals.

threshold -> erode -> depth-aware floodfill -> dilate. The floodfill grows
from every seed at once: a neighbour n of a masked pixel p joins when
|D(p) - D(n)| < theta * D(p) and D(n) is valid. The result is the set of
pixels reachable from the seeds along such directed steps, so it does not
depend on the order in which seeds are visited.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _backend
from ._backend import njit
from .registration import ResidualImage


@dataclass(frozen=True)
class MaskConfig:
    gamma: float = 0.5
    theta: float = 0.007
    erode_radius: int = 2
    dilate_radius: int = 2
    connectivity: int = 4

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if self.erode_radius < 0 or self.dilate_radius < 0:
            raise ValueError("radii must be non-negative")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


def threshold_residuals(residuals: ResidualImage, tau: float, gamma: float) -> np.ndarray:
    """Pixels whose squared residual exceeds gamma * tau^2."""
    t = gamma * tau * tau
    return residuals.valid & (residuals.values > t)


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-element erosion; pixels outside the image count as masked, so
    regions touching the border are not eaten from that side."""
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, _square(radius), border_value=1)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, _square(radius))


_N4 = np.array([[0, -1], [0, 1], [-1, 0], [1, 0]], dtype=np.int64)
_N8 = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=np.int64)


@njit
def _floodfill_nb(order, depth, theta, offsets):
    h, w = depth.shape
    out = np.zeros((h, w), dtype=np.bool_)
    queue = np.empty(h * w, dtype=np.int64)
    head = 0
    tail = 0
    for p in order:
        if not out[p // w, p % w]:
            out[p // w, p % w] = True
            queue[tail] = p
            tail += 1
    while head < tail:
        p = queue[head]
        head += 1
        pv = p // w
        pu = p - pv * w
        dp = depth[pv, pu]
        for k in range(offsets.shape[0]):
            nv = pv + offsets[k, 0]
            nu = pu + offsets[k, 1]
            if nv < 0 or nv >= h or nu < 0 or nu >= w or out[nv, nu]:
                continue
            dn = depth[nv, nu]
            if dn > 0 and abs(dp - dn) < theta * dp:
                out[nv, nu] = True
                queue[tail] = nv * w + nu
                tail += 1
    return out


def _shift(a: np.ndarray, dv: int, du: int, fill) -> np.ndarray:
    """out[v, u] = a[v - dv, u - du]."""
    out = np.full_like(a, fill)
    h, w = a.shape
    out[max(dv, 0):h + min(dv, 0), max(du, 0):w + min(du, 0)] = a[max(-dv, 0):h + min(-dv, 0), max(-du, 0):w + min(-du, 0)]
    return out


def _floodfill_np(seeds, depth, theta, offsets):
    out = seeds.copy()
    frontier = seeds.copy()
    valid = depth > 0
    while frontier.any():
        grown = np.zeros_like(out)
        for dv, du in offsets:
            # neighbour n = p + (dv, du); p's depth viewed from n
            src = _shift(frontier, dv, du, False)
            dp = _shift(depth, dv, du, 0.0)
            grown |= src & valid & (np.abs(dp - depth) < theta * dp)
        frontier = grown & ~out
        out |= frontier
    return out


def floodfill(seeds: np.ndarray, depth: np.ndarray, theta: float, connectivity: int = 4,
              seed_order=None) -> np.ndarray:
    """Grow seeds into neighbours n of p with |D(p) - D(n)| < theta D(p).

    ``seed_order`` optionally lists the flat indices of the seed pixels in
    the order they are queued (default: row-major); the result does not
    depend on it.
    """
    seeds = np.ascontiguousarray(seeds, dtype=bool)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    if seeds.shape != depth.shape:
        raise ValueError("seed mask and depth image must have the same shape")
    offsets = _N4 if connectivity == 4 else _N8
    if seed_order is None:
        order = np.flatnonzero(seeds)
    else:
        order = np.asarray(seed_order, dtype=np.int64)
        if not np.array_equal(np.sort(order), np.flatnonzero(seeds)):
            raise ValueError("seed_order must be a permutation of the seed pixels")
    if _backend.use_numba():
        return _floodfill_nb(order, depth, float(theta), offsets)
    return _floodfill_np(seeds, depth, float(theta), offsets)


@dataclass
class MaskStages:
    raw: np.ndarray
    eroded: np.ndarray
    filled: np.ndarray
    final: np.ndarray


def build_mask_stages(residuals: ResidualImage, depth: np.ndarray, tau: float,
                      config: MaskConfig | None = None) -> MaskStages:
    config = config or MaskConfig()
    if residuals.shape != np.shape(depth):
        raise ValueError("residual image and depth must have the same shape")
    raw = threshold_residuals(residuals, tau, config.gamma)
    eroded = erode(raw, config.erode_radius)
    filled = floodfill(eroded, depth, config.theta, config.connectivity)
    final = dilate(filled, config.dilate_radius)
    return MaskStages(raw, eroded, filled, final)


def build_mask(residuals: ResidualImage, depth: np.ndarray, tau: float, config: MaskConfig | None = None) -> np.ndarray:
    return build_mask_stages(residuals, depth, tau, config).final


def write_histogram_csv(path, residuals: ResidualImage, bins: int = 100, range_=None) -> None:
    counts, edges = residuals.histogram(bins, range_)
    centers = 0.5 * (edges[:-1] + edges[1:])
    lines = ["value,count"] + [f"{c:.9g},{n}" for c, n in zip(centers, counts)]
    Path(path).write_text("\n".join(lines) + "\n")
