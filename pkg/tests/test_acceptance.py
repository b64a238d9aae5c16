"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line."""

import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dynfusion import dataset, synth
from dynfusion.dynamics import floodfill
from dynfusion.evaluation import ate_rmse, nearest_distances
from dynfusion.geometry import Pose, exp_map
from dynfusion.index import BlockIndex
from dynfusion.mesh import MIN_WEIGHT, extract_mesh
from dynfusion.pipeline import PipelineConfig, run_sequence
from dynfusion.refinement import RefinementConfig
from dynfusion.registration import RegistrationConfig, joint_error, linearize
from dynfusion.tsdf import TsdfVolume, VolumeConfig

import scenes


def _fuse(vol, frame, pose):
    vol.allocate_for_frame(frame, pose)
    vol.carve_free_space(frame, pose)
    vol.integrate(frame, pose)


def test_c1_gradient_matches_central_differences(report):
    t0 = time.perf_counter()
    vol = scenes.smooth_sphere_volume()
    fr = scenes.smooth_sphere_frame()
    cfg = RegistrationConfig(min_residuals=10)
    rng = np.random.default_rng(2024)
    norm_err, comp_err, raw_comp = [], [], []
    for _ in range(100):
        T = exp_map(rng.normal(0, 0.01, 6))
        _, b = linearize(vol, fr, T, cfg)
        g = 2 * b
        fd = np.zeros(6)
        for i in range(6):
            e = np.zeros(6)
            e[i] = 1e-5
            fd[i] = (joint_error(vol, fr, exp_map(e) @ T, cfg) - joint_error(vol, fr, exp_map(-e) @ T, cfg)) / 2e-5
        norm_err.append(np.linalg.norm(g - fd) / np.linalg.norm(fd))
        # per-component figures are reported, not gated: at this step the stencil
        # crosses trilinear cell faces, which shows on near-zero components
        scale = np.maximum(np.abs(fd), 0.01 * np.abs(fd).max())
        comp_err.append(np.max(np.abs(g - fd) / scale))
        raw_comp.append(np.max(np.abs(g - fd) / np.abs(fd)))
    dt = time.perf_counter() - t0
    ok = bool(max(norm_err) < 1e-3 and dt < 60)
    report("C1", "gradient vs central differences", ok,
           f"max relative error {max(norm_err):.2e} over 100 poses; per component {max(comp_err):.2e} "
           f"(components >= 1% of max), {max(raw_comp):.2e} (all); {dt:.1f} s")
    assert ok


def test_c2_fusion_oracle(report):
    t0 = time.perf_counter()
    k = synth.default_intrinsics(160, 120)
    wall = synth.Primitive("plane", "wall", {"point": (0, 0, 1.0), "normal": (0, 0, -1)}, synth.Pattern("checker", 0.1))
    cams = [(i / 30.0, Pose(np.eye(3), [0.002 * (i - 5), 0.001 * (i % 3), 0.0])) for i in range(10)]
    sc = synth.SceneScript(k, [wall], cams)
    vol = TsdfVolume(VolumeConfig())
    for i, t in enumerate(sc.timestamps):
        _fuse(vol, synth.render(sc, t, i, noise=False).frame, sc.camera_pose(t))
    rng = np.random.default_rng(5)
    uv = np.column_stack([rng.uniform(20, 140, 100), rng.uniform(15, 105, 100)])
    z = np.linspace(0.905, 1.085, 37)
    rays = np.column_stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy, np.ones(100)])
    pts = (rays[:, None, :] * z[None, :, None]).reshape(-1, 3)
    sdf, ok = vol.sample_sdf(pts)
    plane_err = np.abs(sdf - np.tile(1.0 - z, 100))
    plane_ok = ok.all() and plane_err.max() <= vol.config.voxel_size

    c, r = np.array([0.013, -0.021, 1.007]), 0.3
    sph = TsdfVolume.from_function(VolumeConfig(), c - r - 0.15, c + r + 0.15,
                                   lambda p: np.linalg.norm(p - c, axis=1) - r, weight=3)
    mesh = extract_mesh(sph)
    rad_err = np.abs(np.linalg.norm(mesh.vertices - c, axis=1) - r)
    mesh_ok = len(mesh.vertices) > 1000 and rad_err.max() <= sph.config.voxel_size / 2
    dt = time.perf_counter() - t0
    passed = bool(plane_ok and mesh_ok and dt < 60)
    report("C2", "fusion oracle", passed,
           f"plane max |sdf-(1-z)| {plane_err.max() * 1000:.3f} mm over 100 rays (all valid: {bool(ok.all())}); "
           f"sphere mesh max radial err {rad_err.max() * 1000:.3f} mm over {len(mesh.vertices)} vertices; {dt:.1f} s")
    assert passed


def _orbit_run(moving_sphere):
    sc = synth.textured_room_orbit(30, 320, 240, noise_sigma=0.001, moving_sphere=moving_sphere)
    rendered = {}

    def frames():
        for i, t in enumerate(sc.timestamps):
            rendered[i] = synth.render(sc, t, i)
            yield rendered[i].frame

    recall, fpr = [], []

    def on_frame(i, pose, mask, stats, state):
        r = rendered.pop(i)
        dyn = r.dynamic & r.frame.valid
        stat = ~r.dynamic & r.frame.valid
        if i > 0 and dyn.sum() > 0:
            recall.append((mask & dyn).sum() / dyn.sum())
            fpr.append((mask & stat).sum() / stat.sum())

    t0 = time.perf_counter()
    traj, vol, state = run_sequence(PipelineConfig(), frames(), on_frame)
    dt = time.perf_counter() - t0
    return sc, traj, vol, state, recall, fpr, dt


@pytest.fixture(scope="module")
def static_orbit():
    return _orbit_run(False)


@pytest.fixture(scope="module")
def sphere_orbit():
    return _orbit_run(True)


def test_c3_static_tracking(report, static_orbit):
    sc, traj, vol, state, _, _, dt = static_orbit
    ate = ate_rmse(traj, sc.camera)
    lost = sum(s.tracking_lost for s in state.stats)
    ok = ate < 0.01 and lost == 0 and dt < 120
    report("C3", "static tracking (30 frames, 320x240)", ok, f"ATE RMSE {ate * 1000:.2f} mm, {lost} lost, {dt:.1f} s")
    assert ok


def test_c4_dynamics_rejection(report, static_orbit, sphere_orbit):
    sc, traj, vol, state, recall, fpr, dt = sphere_orbit
    static_ate = ate_rmse(static_orbit[1], static_orbit[0].camera)
    ate = ate_rmse(traj, sc.camera)
    ball = sc.primitive("ball")
    # the map frame is the first camera frame
    to_map = sc.camera_pose(sc.timestamps[0]).inverse()
    a, b = to_map.apply(np.array([ball.motion[0][1].translation, ball.motion[-1][1].translation]))
    radius = ball.params["radius"]
    pos, sdf, w, _ = vol.observed()
    s = np.clip((pos - a) @ (b - a) / np.dot(b - a, b - a), 0, 1)
    inside = np.linalg.norm(pos - (a + s[:, None] * (b - a)), axis=1) < radius
    tau = vol.config.truncation
    occupied = inside & (w >= MIN_WEIGHT) & (np.abs(sdf) < tau / 2)
    ok_a = np.mean(recall) >= 0.9 and np.mean(fpr) <= 0.1
    ok_b = occupied.sum() == 0
    ok_c = ate <= 2 * static_ate
    ok = bool(ok_a and ok_b and ok_c)
    report("C4", "dynamics rejection", ok,
           f"(a) mean recall {np.mean(recall):.4f} over {len(recall)} frames, mean FPR {np.mean(fpr):.4f}; "
           f"(b) {int(occupied.sum())} occupied of {int(inside.sum())} observed swept voxels; "
           f"(c) ATE {ate * 1000:.2f} mm vs static {static_ate * 1000:.2f} mm; {dt:.1f} s")
    assert ok


def test_c5_free_space_reversion(report):
    k = synth.default_intrinsics(160, 120)
    n_obj, n_carve = 10, 30
    t_obj = (n_obj - 0.5) / 30.0
    prims = [
        synth.Primitive("plane", "wall", {"point": (0, 0, 2.0), "normal": (0, 0, -1)}, synth.Pattern("checker", 0.2)),
        synth.Primitive("box", "crate", {"center": (0.0, 0.0, 1.0), "half": (0.15, 0.15, 0.15)},
                        synth.Pattern("checker", 0.05, (200, 60, 60)), visible=(-1.0, t_obj)),
    ]
    cams = [(i / 30.0, Pose()) for i in range(n_obj + n_carve)]
    sc = synth.SceneScript(k, prims, cams, noise_sigma=0.001)
    cfg = VolumeConfig(max_weight=64, carve_weight=1)
    vol = TsdfVolume(cfg)
    tau = cfg.truncation
    for i in range(n_obj):
        _fuse(vol, synth.render(sc, sc.timestamps[i], i).frame, Pose())
    pos, sdf, w, _ = vol.observed()
    near = np.all(np.abs(pos - [0, 0, 1.0]) < 0.15 + tau / 2, axis=1)
    obj = near & (w >= MIN_WEIGHT) & (np.abs(sdf) < tau / 2)
    ijk = np.rint(pos[obj] / cfg.voxel_size).astype(np.int64)
    first = np.full(len(ijk), -1)
    for j in range(n_carve):
        i = n_obj + j
        _fuse(vol, synth.render(sc, sc.timestamps[i], i).frame, Pose())
        s, _, _ = vol.voxels(ijk)
        first[(first < 0) & (s > tau / 2)] = j + 1
    # closed form for the worst starting state: s_k = (w0 s0 + k tau) / (w0 + k)
    s0 = sdf[obj].min()
    w0 = int(w[obj].max())
    bound = int(np.floor((w0 * (tau / 2 - s0)) / (tau - tau / 2))) + 1
    ok = bool(len(ijk) > 100 and np.all(first > 0) and first.max() <= n_carve)
    report("C5", "free-space reversion", ok,
           f"{len(ijk)} object voxels, all above tau/2 after {first.max() if np.all(first > 0) else 'never'} "
           f"carve frames (closed-form bound for s0={s0:.3f}, w0={w0}: {bound})")
    assert ok


def test_c6_floodfill_conformance(report):
    depth = scenes.FLOODFILL_DEPTH
    exact = True
    for seed, expected in scenes.FLOODFILL_TRACES.items():
        seeds = np.zeros(depth.shape, bool)
        seeds[seed] = True
        exact &= {tuple(p) for p in np.argwhere(floodfill(seeds, depth, 0.007))} == expected
    rng = np.random.default_rng(11)
    seeds = rng.random(depth.shape) < 0.3
    seeds[0, 0] = seeds[3, 3] = True
    ref = floodfill(seeds, depth, 0.007)
    flat = np.flatnonzero(seeds)
    same = all(np.array_equal(floodfill(seeds, depth, 0.007, seed_order=rng.permutation(flat)), ref)
               for _ in range(100))
    ok = bool(exact and same)
    report("C6", "floodfill conformance", ok,
           f"hand-traced fixture exact: {bool(exact)}; invariant over 100 seed orders of {len(flat)} seeds: {same}")
    assert ok


def test_c7_hash_integrity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    pool = np.unique(rng.integers(-200_000, 200_000, (2_100_000, 3), dtype=np.int32), axis=0)
    pool = pool[rng.permutation(len(pool))[:2_000_000]]
    present, absent = pool[:1_000_000], pool[1_000_000:]
    idx = BlockIndex()
    for lo in range(0, len(present), 50_000):
        idx.insert(present[lo:lo + 50_000])
    # sorted-list oracle
    key = lambda c: (c[:, 0].astype(np.int64) << 42) ^ ((c[:, 1].astype(np.int64) & 0x1FFFFF) << 21) ^ (c[:, 2].astype(np.int64) & 0x1FFFFF)
    sorted_keys = np.sort(key(present))
    got = idx.lookup(present)
    lost = int(np.sum((got < 0) | (got >= len(present)))) + int(np.sum(np.any(idx.coords[np.maximum(got, 0)] != present, axis=1)))
    oracle_absent = ~np.isin(key(absent), sorted_keys)
    false_hits = int(np.sum(idx.lookup(absent) >= 0))
    dt = time.perf_counter() - t0
    ok = lost == 0 and false_hits == 0 and oracle_absent.all() and len(idx) == 1_000_000 and dt < 30
    report("C7", "hash-table integrity", ok, f"1e6 inserts, {lost} lost, {false_hits} false hits on 1e6 absent, {dt:.1f} s")
    assert ok


def test_c8_evaluation_oracles(report):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        poses = [exp_map(rng.normal(size=6)) for _ in range(50)]
        gt = list(zip(np.arange(50) / 30.0, poses))
        T = exp_map(rng.normal(size=6) * 2)
        worst = max(worst, ate_rmse([(t, T @ p) for t, p in gt], gt))
    a, b = rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3))
    brute = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(1)
    exact = np.array_equal(nearest_distances(a, b), brute)
    ok = bool(worst < 1e-9 and exact)
    report("C8", "evaluation oracles", ok, f"max ATE on rigid copies {worst:.2e}; NN distances exact: {exact}")
    assert ok


TUM_ROOT = os.environ.get("DYNFUSION_TUM_ROOT")
TUM_CASES = [("rgbd_dataset_freiburg3_sitting_static", 0.03), ("rgbd_dataset_freiburg3_walking_static", 0.05)]


@pytest.mark.parametrize("name,bound", TUM_CASES)
def test_c9_tum_regression(report, name, bound):
    root = Path(TUM_ROOT) / name if TUM_ROOT else None
    if root is None or not root.is_dir():
        report("C9", f"TUM regression {name}", "SKIP", "set DYNFUSION_TUM_ROOT to a directory holding the sequence")
        pytest.skip("TUM sequence not available")
    manifest = dataset.load_manifest(root)
    cfg = dataclasses.replace(PipelineConfig(), refinement=RefinementConfig(enabled=True, n=10))
    traj, _, _ = run_sequence(cfg, (manifest.frame(i) for i in range(len(manifest))))
    ate = ate_rmse(traj, dataset.read_trajectory(manifest.groundtruth))
    ok = ate <= bound
    report("C9", f"TUM regression {name}", ok, f"ATE RMSE {ate:.4f} m (bound {bound} m)")
    assert ok
