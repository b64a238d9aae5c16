"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--width 320]

Each case runs once per backend to warm up (numba compiles or loads its
cache), then reports the best of ``--repeat`` timings and checks that both
backends produced the same result.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dynfusion import _backend, synth
from dynfusion.dynamics import floodfill
from dynfusion.index import BlockIndex
from dynfusion.registration import RegistrationConfig, register
from dynfusion.tsdf import TsdfVolume, VolumeConfig


def _room(width, height, n=6):
    sc = synth.textured_room_orbit(n, width, height, noise_sigma=0.001)
    frames = [synth.render(sc, t, i).frame for i, t in enumerate(sc.timestamps)]
    return sc, frames


def _fused(sc, frames):
    vol = TsdfVolume(VolumeConfig())
    for fr in frames:
        p = sc.camera_pose(fr.timestamp)
        vol.allocate_for_frame(fr, p)
        vol.carve_free_space(fr, p)
        vol.integrate(fr, p)
    return vol


def cases(width, height):
    rng = np.random.default_rng(0)
    sc, frames = _room(width, height)
    # poses relative to the first camera so the volume sits in front of it
    base = sc.camera_pose(0.0).inverse()
    sc.camera = [(t, base @ p) for t, p in sc.camera]
    vol = _fused(sc, frames)
    pts, _, _, _ = vol.observed()
    query = pts[rng.choice(len(pts), min(len(pts), 200_000), replace=False)] + rng.uniform(-0.005, 0.005, (min(len(pts), 200_000), 3))
    coords = np.unique(rng.integers(-5000, 5000, (220_000, 3), dtype=np.int32), axis=0)[:200_000]
    depth = frames[3].depth.astype(np.float64)
    seeds = np.zeros(depth.shape, bool)
    seeds[depth.shape[0] // 2, depth.shape[1] // 2] = True
    pose3 = sc.camera_pose(frames[3].timestamp)

    def hash_insert_lookup():
        idx = BlockIndex()
        idx.insert(coords)
        return idx.lookup(coords)

    def fuse_sequence():
        v = _fused(sc, frames)
        return v.sdf[: v.num_blocks]

    def sample_points():
        return vol.sample(query)[0]

    def raycast():
        return vol.raycast_depth(pose3, sc.intrinsics)

    def fill():
        return floodfill(seeds, depth, 0.007)

    def track():
        return register(vol, frames[3], sc.camera_pose(frames[2].timestamp), None, RegistrationConfig()).pose.matrix()

    return [
        (f"hash insert+lookup ({len(coords)} blocks)", hash_insert_lookup, 0),
        (f"fuse {len(frames)} frames {width}x{height}", fuse_sequence, 1e-6),
        (f"trilinear sample ({len(query)} points)", sample_points, 1e-6),
        (f"raycast {width}x{height}", raycast, 1e-4),
        (f"floodfill {width}x{height}", fill, 0),
        (f"register one frame {width}x{height}", track, 1e-6),
    ]


def _best(fn, repeat):
    out = fn()
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--width", type=int, default=320)
    args = ap.parse_args(argv)
    height = args.width * 3 // 4
    print(f"{'case':<42} {'numba s':>9} {'numpy s':>9} {'speedup':>8}  agree")
    for name, fn, tol in cases(args.width, height):
        with _backend.use_backend("numba"):
            t_nb, r_nb = _best(fn, args.repeat)
        with _backend.use_backend("numpy"):
            t_np, r_np = _best(fn, args.repeat)
        a, b = np.asarray(r_nb, dtype=np.float64), np.asarray(r_np, dtype=np.float64)
        agree = a.shape == b.shape and np.allclose(a, b, atol=tol, rtol=0, equal_nan=True)
        print(f"{name:<42} {t_nb:9.4f} {t_np:9.4f} {t_np / t_nb:8.1f}  {agree}")


if __name__ == "__main__":
    main()
