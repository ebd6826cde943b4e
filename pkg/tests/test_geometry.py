import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatcal.errors import DegenerateRotation
from splatcal.geometry import (CameraIntrinsics, CameraPose, compose, hat, perturb_left,
                               pixel_ray, pixel_rays, plucker_map, quat_to_rot, quat_to_rot_batch,
                               relative_pose, rot_to_quat, rotation_angle, se3_exp, so3_exp,
                               so3_log)

vec3 = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)
quat = st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1).map(np.array)


def _pose(q, t):
    return CameraPose(q, t)


@given(quat)
def test_quat_to_rot_is_orthonormal(q):
    R = quat_to_rot(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)


@given(quat)
def test_rot_to_quat_roundtrip(q):
    R = quat_to_rot(q)
    assert np.allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-10)


def test_quat_batch_matches_single():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(20, 4))
    Rb = quat_to_rot_batch(q)
    for i in range(20):
        assert np.allclose(Rb[i], quat_to_rot(q[i]), atol=1e-12)


def test_zero_quaternion_rejected():
    with pytest.raises(DegenerateRotation):
        CameraPose(np.zeros(4), np.zeros(3))


@given(vec3)
def test_so3_log_inverts_exp(w):
    if np.linalg.norm(w) >= np.pi - 1e-3:
        w = w / np.linalg.norm(w) * 3.0
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-8)


def test_so3_exp_small_angle():
    w = np.array([1e-10, -2e-10, 3e-10])
    assert np.allclose(so3_exp(w), np.eye(3) + hat(w), atol=1e-18)


def test_rotation_angle():
    assert np.isclose(np.rad2deg(rotation_angle(so3_exp([0, 0, np.deg2rad(30)]))), 30.0)


def test_se3_exp_pure_translation():
    R, t = se3_exp([1.0, 2.0, 3.0, 0, 0, 0])
    assert np.allclose(R, np.eye(3)) and np.allclose(t, [1, 2, 3])


@settings(max_examples=50)
@given(quat, vec3, quat, vec3)
def test_compose_and_relative(qa, ta, qb, tb):
    a, b = _pose(qa, ta), _pose(qb, tb)
    rel = relative_pose(a, b)
    # rel maps camera-a coordinates to camera-b coordinates
    x = np.array([0.3, -0.2, 1.5])
    xw = a.inverse().apply(x)
    assert np.allclose(rel.apply(x), b.apply(xw), atol=1e-9)
    assert np.allclose(compose(a, a.inverse()).matrix(), np.eye(4), atol=1e-9)


def test_center_and_inverse():
    p = CameraPose.from_rt(so3_exp([0.1, 0.2, -0.3]), [1.0, -2.0, 0.5])
    assert np.allclose(p.apply(p.center), 0.0, atol=1e-12)
    assert np.allclose(p.inverse().matrix(), np.linalg.inv(p.matrix()), atol=1e-12)


def _expm(X, terms=30):
    out, term = np.eye(len(X)), np.eye(len(X))
    for n in range(1, terms):
        term = term @ X / n
        out = out + term
    return out


def test_perturb_left_matches_matrix_exponential():
    p = CameraPose.from_rt(so3_exp([0.3, -0.1, 0.2]), [0.5, 0.1, -1.0])
    xi = np.array([0.01, -0.02, 0.03, 0.04, 0.05, -0.06])
    X = np.zeros((4, 4))
    X[:3, :3] = hat(xi[3:])
    X[:3, 3] = xi[:3]
    assert np.allclose(perturb_left(p, xi).matrix(), _expm(X) @ p.matrix(), atol=1e-12)


def test_pixel_center_convention():
    k = CameraIntrinsics(10.0, 10.0, 8.0, 8.0, 16, 16)
    o, d = pixel_ray(k, CameraPose(), 7, 7)
    # pixel 7 spans [7, 8), so its center 7.5 sits half a pixel left of cx = 8
    assert np.allclose(o, 0.0)
    assert np.allclose(d, np.array([-0.05, -0.05, 1.0]) / np.linalg.norm([-0.05, -0.05, 1.0]))


def test_pixel_rays_hit_their_pixels():
    k = CameraIntrinsics(20.0, 22.0, 7.5, 8.5, 16, 16)
    pose = CameraPose.from_rt(so3_exp([0.1, -0.2, 0.05]), [0.2, 0.0, 1.0])
    vv, uu = np.mgrid[0:16, 0:16]
    o, d = pixel_rays(k, pose, uu, vv)
    x = pose.apply(o + 2.0 * d)
    u = k.fx * x[..., 0] / x[..., 2] + k.cx
    v = k.fy * x[..., 1] / x[..., 2] + k.cy
    assert np.allclose(u, uu + 0.5) and np.allclose(v, vv + 0.5)


def test_plucker_moment_is_invariant_along_the_ray():
    k = CameraIntrinsics.from_fov(8, 6, 60)
    pose = CameraPose.from_rt(so3_exp([0.0, 0.3, 0.0]), [0.5, -0.1, 2.0])
    m = plucker_map(k, pose)
    assert m.shape == (6, 8) and m.as_array().shape == (6, 8, 6)
    assert np.allclose(np.linalg.norm(m.directions, axis=-1), 1.0)
    p = pose.center + 3.7 * m.directions
    assert np.allclose(np.cross(p, m.directions), m.moments, atol=1e-12)
    assert np.allclose(np.sum(m.moments * m.directions, axis=-1), 0.0, atol=1e-12)


def test_intrinsics_validation_and_json():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 9.0, 0.0, 4, 4)
    k = CameraIntrinsics.from_fov(64, 48, 60)
    assert CameraIntrinsics.from_json(k.to_json()) == k
    assert np.isclose(k.scaled(32, 24).fx, k.fx / 2)


def test_pose_json_roundtrip():
    p = CameraPose.from_rt(so3_exp([0.2, 0.1, 0.0]), [1.0, 2.0, 3.0])
    q = CameraPose.from_json(p.to_json())
    assert np.allclose(q.matrix(), p.matrix())


def test_quat_examples():
    assert np.allclose(quat_to_rot([1.0, 0, 0, 0]), np.eye(3))
    assert np.allclose(quat_to_rot([2.0, 0, 0, 0]), np.eye(3))
    R = quat_to_rot([np.sqrt(2) / 2, 0, 0, np.sqrt(2) / 2])
    assert np.allclose(R @ [1.0, 0, 0], [0, 1.0, 0])


def test_relative_pose_examples():
    a = CameraPose.from_rt(so3_exp([0.4, -0.2, 0.1]), [0.3, 0.2, -1.0])
    assert np.allclose(relative_pose(a, a).matrix(), np.eye(4), atol=1e-12)
    t = np.array([0.5, -1.0, 2.0])
    rel = relative_pose(CameraPose(), CameraPose(np.array([1.0, 0, 0, 0]), t))
    assert np.allclose(rel.R, np.eye(3)) and np.allclose(rel.trans, t)
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = CameraPose(rng.normal(size=4), rng.normal(size=3))
        b = CameraPose(rng.normal(size=4), rng.normal(size=3))
        assert np.allclose(compose(relative_pose(a, b), a).matrix(), b.matrix(), atol=1e-9)


def test_pixel_ray_examples():
    f = 10.0
    k = CameraIntrinsics(f, f, 8.5, 8.5, 32, 32)
    o, d = pixel_ray(k, CameraPose(), 8, 8)
    assert np.allclose(o, 0) and np.allclose(d, [0, 0, 1.0])
    o, d = pixel_ray(k, CameraPose(), 8.5 + f - 0.5, 8.5 - 0.5)
    assert np.allclose(d, np.array([1.0, 0, 1.0]) / np.sqrt(2))
    # camera center at (0, 1, 0): t = -R c
    shifted = CameraPose(np.array([1.0, 0, 0, 0]), np.array([0, -1.0, 0]))
    o, d = pixel_ray(k, shifted, 8, 8)
    assert np.allclose(o, [0, 1.0, 0])


def test_plucker_examples():
    k = CameraIntrinsics(10.0, 10.0, 8.5, 4.5, 17, 9)
    m = plucker_map(k, CameraPose())
    assert m.shape == (9, 17) and np.allclose(m.moments, 0)
    shifted = CameraPose(np.array([1.0, 0, 0, 0]), np.array([0, -1.0, 0]))
    m = plucker_map(k, shifted)
    assert np.allclose(m.directions[4, 8], [0, 0, 1.0]) and np.allclose(m.moments[4, 8], [1.0, 0, 0])
