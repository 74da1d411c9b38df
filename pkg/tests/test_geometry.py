import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from querystream.errors import InvariantError
from querystream.geometry import (Camera, Pose, align_centers, linear_motion_compensate, pose_inverse,
                                  project_point, random_pose, relative_ego_pose)
from querystream.selfcheck import check_alignment, check_gauge, check_motion_compensation

seeds = st.integers(0, 2**32 - 1)


def test_pose_inverse_examples():
    assert pose_inverse(Pose.identity()) == Pose.identity()
    inv = pose_inverse(Pose.translation(1, 2, 3))
    assert np.array_equal(inv.t, [-1.0, -2.0, -3.0])
    assert np.array_equal(inv.rotation, np.eye(3))


@given(seeds)
def test_pose_inverse_composition_and_involution(seed):
    p = random_pose(np.random.default_rng(seed))
    assert np.abs((p @ pose_inverse(p)).matrix - np.eye(4)).max() < 1e-12
    assert np.abs(pose_inverse(pose_inverse(p)).matrix - p.matrix).max() < 1e-12


def test_non_rigid_rejected():
    m = np.eye(4)
    m[0, 0] = 2.0
    with pytest.raises(InvariantError):
        Pose(m)
    m = np.eye(4)
    m[3, 0] = 1.0
    with pytest.raises(InvariantError):
        Pose(m)
    reflect = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(InvariantError):
        Pose(reflect)


def test_relative_ego_pose_examples():
    p = random_pose(np.random.default_rng(0))
    assert np.abs(relative_ego_pose(p, p).matrix - np.eye(4)).max() < 1e-12
    rel = relative_ego_pose(Pose.identity(), Pose.translation(1, 0, 0))
    assert np.allclose(rel.matrix, Pose.translation(-1, 0, 0).matrix, atol=0)


@given(seeds)
def test_relative_pose_left_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b, g = random_pose(rng), random_pose(rng), random_pose(rng)
    assert np.abs(relative_ego_pose(g @ a, g @ b).matrix - relative_ego_pose(a, b).matrix).max() < 1e-9


def test_align_centers_examples():
    pts = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(align_centers(pts, Pose.identity()), pts)
    rel = relative_ego_pose(Pose.identity(), Pose.translation(1, 0, 0))
    assert np.allclose(align_centers([[5.0, 0.0, 0.0]], rel), [[4.0, 0.0, 0.0]], atol=1e-15)


@given(seeds)
def test_static_alignment_identity(seed):
    rng = np.random.default_rng(seed)
    e_prev, e_cur = random_pose(rng), random_pose(rng)
    p_w = rng.uniform(-100, 100, size=3)
    got = align_centers(e_prev.inverse().apply(p_w), relative_ego_pose(e_prev, e_cur))
    assert np.abs(got - e_cur.inverse().apply(p_w)).max() < 1e-9


def test_motion_compensation_examples():
    rng = np.random.default_rng(2)
    e_prev, e_cur = random_pose(rng), random_pose(rng)
    c = rng.normal(size=3)
    static = linear_motion_compensate(c, [0.0, 0.0], e_prev, e_cur, 0.7)
    assert np.abs(static - align_centers(c, relative_ego_pose(e_prev, e_cur))).max() < 1e-12
    moved = linear_motion_compensate([0, 0, 0], [2.0, 0.0], Pose.identity(), Pose.identity(), 0.5)
    assert np.allclose(moved, [1.0, 0.0, 0.0], atol=0)
    with pytest.raises(ValueError):
        linear_motion_compensate(c, [0, 0], e_prev, e_cur, -1.0)


@settings(max_examples=200)
@given(seeds)
def test_constant_velocity_exactness(seed):
    rng = np.random.default_rng(seed)
    e_prev, e_cur = random_pose(rng), random_pose(rng)
    x0, v, dt = rng.uniform(-50, 50, 3), rng.uniform(-20, 20, 2), rng.uniform(0, 3)
    got = linear_motion_compensate(e_prev.inverse().apply(x0), v, e_prev, e_cur, dt)
    assert np.abs(got - e_cur.inverse().apply(x0 + np.r_[v * dt, 0])).max() < 1e-9


def test_selfcheck_geometry_suites():
    assert check_alignment(2000).passed
    assert check_motion_compensation(500).passed
    assert check_gauge(200).passed


# -- cameras ----------------------------------------------------------------------

def _axis_camera():
    # camera frame == ego frame, so the optical axis is ego +z
    return Camera(Pose.identity(), 100.0, 80.0, 160.0, 120.0, 320, 240)


def test_project_on_axis():
    assert project_point([0.0, 0.0, 10.0], _axis_camera()) == (160.0, 120.0, 10.0)


def test_project_behind_and_outside():
    cam = _axis_camera()
    assert project_point([0.0, 0.0, -1.0], cam) is None
    assert project_point([1000.0, 0.0, 1.0], cam) is None


def test_project_off_axis_formula():
    cam = _axis_camera()
    u, v, z = project_point([1.5, -0.5, 4.0], cam)
    assert abs(u - (100.0 * 1.5 / 4.0 + 160.0)) < 1e-12
    assert abs(v - (80.0 * -0.5 / 4.0 + 120.0)) < 1e-12
    assert z == 4.0


def test_looking_camera_sees_forward_not_backward():
    front = Camera.looking(0.0)
    assert project_point([10.0, 0.0, 0.0], front) is not None
    assert project_point([-10.0, 0.0, 0.0], front) is None
    u, v, _ = project_point([10.0, 0.0, 0.0], front)
    assert abs(u - front.cx) < 1e-9 and abs(v - front.cy) < 1e-9
