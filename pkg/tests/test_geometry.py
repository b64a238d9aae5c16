import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynfusion.geometry import (
    BehindCamera, CameraIntrinsics, InvalidDepth, Pose, Twist, backproject, compose, exp_map, hat,
    interpolate, invert, log_map, look_at, project, quaternion_to_rotation, rotation_to_quaternion,
)

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)

finite = st.floats(-1.0, 1.0, allow_nan=False)
twists = arrays(np.float64, 6, elements=st.floats(-2.0, 2.0, allow_nan=False))
small_rot = arrays(np.float64, 6, elements=st.floats(-1.0, 1.0, allow_nan=False))


def random_pose(rng):
    return exp_map(np.concatenate([rng.normal(size=3), rng.uniform(-1, 1, 3)]))


def series_exp(xi, terms=20):
    m = Twist.from_vector(xi).matrix()
    out = np.eye(4)
    p = np.eye(4)
    for k in range(1, terms):
        p = p @ m / k
        out += p
    return out


@pytest.mark.parametrize("kw", [dict(fx=0), dict(fy=-1), dict(cx=0), dict(cx=640), dict(cy=480), dict(depth_scale=0)])
def test_intrinsics_validation(kw):
    args = dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    args.update(kw)
    with pytest.raises(ValueError):
        CameraIntrinsics(**args)


def test_backproject_examples():
    assert np.allclose(backproject((320, 240), 2.0, K), [0, 0, 2.0])
    assert np.allclose(backproject((820, 240), 3.0, K), [3.0, 0, 3.0])
    assert np.allclose(backproject((100, 80), 1.5, K), [-0.66, -0.48, 1.5])


@pytest.mark.parametrize("d", [0.0, -1.0, np.nan, np.inf])
def test_backproject_invalid_depth(d):
    with pytest.raises(InvalidDepth):
        backproject((10, 10), d, K)


def test_project_examples():
    assert np.allclose(project([0, 0, 2.0], K), [320, 240])
    assert np.allclose(project([3.0, 0, 3.0], K), [820, 240])
    with pytest.raises(BehindCamera):
        project([0, 0, 0.0], K)
    with pytest.raises(BehindCamera):
        project([0, 0, -1.0], K)


def test_project_backproject_round_trip(rng):
    x = np.column_stack([rng.uniform(-2, 2, 1000), rng.uniform(-2, 2, 1000), rng.uniform(0.1, 5, 1000)])
    for p in x:
        uv = project(p, K)
        assert np.allclose(backproject(uv, p[2], K), p, atol=1e-12)


@given(st.floats(0, 639), st.floats(0, 479), st.floats(0.01, 10))
def test_pixel_round_trip(u, v, d):
    assert np.allclose(project(backproject((u, v), d, K), K), (u, v), atol=1e-9)


def test_exp_zero_and_translation():
    assert np.allclose(exp_map(np.zeros(6)).matrix(), np.eye(4))
    p = exp_map([1, 2, 3, 0, 0, 0])
    assert np.allclose(p.rotation, np.eye(3))
    assert np.allclose(p.translation, [1, 2, 3])


@given(twists)
def test_exp_matches_series(xi):
    # the 20-term series is only accurate for moderate twists
    if np.linalg.norm(xi) > 2.0:
        xi = xi / np.linalg.norm(xi) * 2.0
    assert np.allclose(exp_map(xi).matrix(), series_exp(xi, 30), atol=1e-10)


def test_exp_matches_twenty_term_series(rng):
    for _ in range(50):
        xi = rng.uniform(-0.5, 0.5, 6)
        assert np.allclose(exp_map(xi).matrix(), series_exp(xi), atol=1e-10)


@given(arrays(np.float64, 6, elements=st.floats(-1e-8, 1e-8, allow_nan=False)))
def test_small_angle_first_order(xi):
    if np.linalg.norm(xi) > 1e-8:
        xi = xi / np.linalg.norm(xi) * 1e-8
    assert np.allclose(exp_map(xi).matrix(), np.eye(4) + Twist.from_vector(xi).matrix(), atol=1e-12, rtol=0)


@given(twists)
def test_exp_is_valid_pose(xi):
    w = xi[3:]
    if np.linalg.norm(w) > np.pi:
        xi = np.concatenate([xi[:3], w / np.linalg.norm(w) * np.pi])
    assert exp_map(xi).is_valid()


@given(small_rot, small_rot)
def test_group_axioms(a, b):
    A, B = exp_map(a), exp_map(b)
    assert np.allclose(compose(A, invert(A)).matrix(), np.eye(4), atol=1e-9)
    assert np.allclose(compose(invert(B), compose(B, A)).matrix(), A.matrix(), atol=1e-9)
    assert np.allclose(compose(Pose(), B).matrix(), B.matrix())
    assert np.allclose(invert(Pose()).matrix(), np.eye(4))


@given(small_rot)
def test_log_inverts_exp(xi):
    assert np.allclose(log_map(exp_map(xi)).vector(), xi, atol=1e-9)


def test_log_near_pi():
    w = np.array([0.0, 0.0, np.pi - 1e-7])
    assert np.allclose(exp_map(log_map(exp_map(np.r_[0.1, 0.2, 0.3, w])).vector()).matrix(),
                       exp_map(np.r_[0.1, 0.2, 0.3, w]).matrix(), atol=1e-7)


def test_twist_rejects_nonfinite():
    with pytest.raises(ValueError):
        Twist([np.nan, 0, 0], [0, 0, 0])


def test_hat_is_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(hat(a) @ b, np.cross(a, b))


def test_pose_arrays_read_only():
    p = Pose()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


def test_quaternion_round_trip(rng):
    for _ in range(200):
        R = random_pose(rng).rotation
        q = rotation_to_quaternion(R)
        assert abs(np.linalg.norm(q) - 1) < 1e-12
        assert np.allclose(quaternion_to_rotation(q), R, atol=1e-12)
    assert np.allclose(rotation_to_quaternion(np.eye(3)), [0, 0, 0, 1])


def test_interpolate_endpoints_and_midpoint(rng):
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose(interpolate(a, b, 0).matrix(), a.matrix())
    assert np.allclose(interpolate(a, b, 1).matrix(), b.matrix(), atol=1e-9)
    m = interpolate(Pose(), Pose(translation=[2, 0, 0]), 0.5)
    assert np.allclose(m.translation, [1, 0, 0])


def test_look_at_points_optical_axis():
    p = look_at([0, 0, 0], [0, 0, 5])
    assert p.is_valid()
    assert np.allclose(p.rotation[:, 2], [0, 0, 1])
    q = look_at([1, 2, 3], [4, 2, 7])
    d = np.array([3, 0, 4]) / 5.0
    assert np.allclose(q.rotation[:, 2], d)
