import numpy as np
import pytest
from hypothesis import given, strategies as st

from dynfusion.evaluation import (EvaluationError, align, ate, ate_rmse, model_distance_cdf, nearest_distances,
                                  rpe_over_time, write_ate_csv, write_cdf_csv, write_rpe_csv)
from dynfusion.geometry import Pose, exp_map


def _trajectory(rng, n=40):
    times = np.arange(n) / 30.0
    poses = []
    p = Pose()
    for _ in range(n):
        p = p @ exp_map(rng.normal(scale=[0.02, 0.02, 0.02, 0.01, 0.01, 0.01]))
        poses.append(p)
    return list(zip(times, poses))


@given(st.integers(0, 2**32 - 1))
def test_ate_zero_for_rigid_copy(seed):
    rng = np.random.default_rng(seed)
    gt = _trajectory(rng)
    T = exp_map(rng.normal(size=6) * [1, 1, 1, 1, 1, 1])
    est = [(t, T @ p) for t, p in gt]
    assert ate_rmse(est, gt) < 1e-9


def test_alignment_recovers_the_transform(rng):
    a = rng.normal(size=(50, 3))
    T = exp_map([0.3, -0.2, 0.5, 0.4, -0.1, 0.7])
    S = align(a, T.apply(a))
    assert np.allclose(S.matrix(), T.matrix(), atol=1e-12)


def test_alignment_never_reflects():
    # a planar set admits a reflection with equal cost; a proper rotation is required
    a = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    b = a * [1, 1, -1]
    assert np.linalg.det(align(a, b).rotation) == pytest.approx(1.0)


def test_ate_noise_matches_rmse(rng):
    gt = _trajectory(rng, 400)
    noise = rng.normal(scale=0.01, size=(400, 3))
    est = [(t, Pose(p.rotation, p.translation + e)) for (t, p), e in zip(gt, noise)]
    res = ate(est, gt)
    # alignment absorbs a little of the noise, never adds any
    raw = np.sqrt(np.mean(np.sum(noise**2, axis=1)))
    assert res.rmse <= raw
    assert res.rmse == pytest.approx(raw, rel=0.02)
    assert len(res.errors) == 400


def test_ate_accepts_times_and_pose_lists(rng):
    gt = _trajectory(rng, 10)
    times = np.array([t for t, _ in gt])
    poses = [p for _, p in gt]
    assert ate_rmse((times, poses), gt) < 1e-9


def test_ate_needs_associations(rng):
    gt = _trajectory(rng, 10)
    far = [(t + 100.0, p) for t, p in gt]
    with pytest.raises(EvaluationError):
        ate_rmse(far, gt)


def test_rpe_zero_for_rigid_copy_and_constant_bias(rng):
    gt = _trajectory(rng, 90)
    T = exp_map([0.1, 0.2, 0.3, 0.2, 0.1, -0.3])
    series = rpe_over_time([(t, T @ p) for t, p in gt], gt, delta=1.0)
    assert len(series) == 60
    assert max(e for _, e in series) < 1e-9
    # a world-frame drift of 1 cm/s shows up as exactly 1 cm over one second
    drift = [(t, Pose(np.eye(3), [0.01 * t, 0, 0]) @ p) for t, p in gt]
    errs = [e for _, e in rpe_over_time(drift, gt, delta=1.0)]
    assert np.allclose(errs, 0.01, atol=1e-9)


def test_nearest_distances_match_brute_force(rng):
    a = rng.uniform(-1, 1, size=(1000, 3))
    b = rng.uniform(-1, 1, size=(1000, 3))
    brute = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    assert np.array_equal(nearest_distances(a, b), brute)


def test_nearest_distances_rejects_empty():
    with pytest.raises(EvaluationError):
        nearest_distances(np.zeros((0, 3)), np.zeros((3, 3)))


def test_cdf_monotone_and_complete(rng):
    ref = rng.uniform(size=(500, 3))
    model = ref + rng.normal(scale=0.01, size=ref.shape)
    edges = np.linspace(0, 0.2, 41)
    cdf = model_distance_cdf(model, ref, edges)
    assert np.all(np.diff(cdf) >= 0)
    assert cdf[-1] == 100.0
    assert model_distance_cdf(ref[:100], ref, [0.0])[0] == 100.0


def test_cdf_shifted_plane():
    g = np.stack(np.meshgrid(np.linspace(0, 1, 41), np.linspace(0, 1, 41)), -1).reshape(-1, 2)
    ref = np.column_stack([g, np.zeros(len(g))])
    model = ref + [0, 0, 0.03]
    cdf = model_distance_cdf(model, ref, [0.029, 0.031])
    assert list(cdf) == [0.0, 100.0]


def test_csv_writers(tmp_path):
    write_ate_csv(tmp_path / "a.csv", [("room", 0.0123456)])
    assert (tmp_path / "a.csv").read_text() == "scene,ate_rmse\nroom,0.012346\n"
    write_rpe_csv(tmp_path / "r.csv", [(0.5, 0.25)])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["time,rpe", "0.500000,0.250000"]
    write_cdf_csv(tmp_path / "c.csv", [0.0, 0.1], [10.0, 100.0])
    assert (tmp_path / "c.csv").read_text().splitlines()[2] == "0.100000,100.0000"
