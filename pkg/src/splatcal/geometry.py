"""Camera model, rigid-transform algebra and Plücker ray maps.

Conventions used throughout the package:

* extrinsics are world-to-camera, ``x_cam = R @ x_world + t``;
* quaternions are ``(w, x, y, z)``;
* pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``;
* SE(3) tangent vectors are ``(v, w)``: translation part first, rotation part
  second, applied as a left perturbation ``T <- exp(xi) T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotation

_QUAT_EPS = 1e-12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics shared by every view of a sequence."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def with_vector(self, v) -> "CameraIntrinsics":
        return CameraIntrinsics(float(v[0]), float(v[1]), float(v[2]), float(v[3]),
                                self.width, self.height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                                width, height)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform stored as unit quaternion + translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64)
        n = np.linalg.norm(q)
        if not n > _QUAT_EPS:
            raise DegenerateRotation(f"quaternion norm {n} too small")
        object.__setattr__(self, "quat", _frozen(q / n))
        object.__setattr__(self, "trans", _frozen(np.asarray(self.trans, dtype=np.float64).reshape(3)))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(rot_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.quat)

    @property
    def t(self) -> np.ndarray:
        return self.trans

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-R^T t``."""
        return -self.R.T @ self.trans

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.trans
        return T

    def inverse(self):
        R = self.R
        return type(self).from_rt(R.T, -R.T @ self.trans)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.trans

    def to_json(self) -> dict:
        return {"quat": [float(x) for x in self.quat], "trans": [float(x) for x in self.trans]}

    @classmethod
    def from_json(cls, d: dict):
        return cls(np.array(d["quat"], dtype=np.float64), np.array(d["trans"], dtype=np.float64))


class RigidTransform(CameraPose):
    """Same representation as :class:`CameraPose`; used for relative and gauge transforms."""


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not n > _QUAT_EPS:
        raise DegenerateRotation(f"quaternion norm {n} too small")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_rot_batch(q: np.ndarray) -> np.ndarray:
    """Vectorized :func:`quat_to_rot` for an ``(N, 4)`` array; returns ``(N, 3, 3)``."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= _QUAT_EPS):
        bad = int(np.flatnonzero(n[..., 0] <= _QUAT_EPS)[0])
        raise DegenerateRotation(f"quaternion {bad} has near-zero norm")
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R) -> np.ndarray:
    """Unit quaternion with non-negative ``w`` (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta**2 * K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        A = 0.5 * (R + np.eye(3))
        axis = A[np.argmax(np.diag(A))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2 * np.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.arccos(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)))


def se3_exp(xi):
    """Exponential map of ``xi = (v, w)``; returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    K = hat(w)
    R = so3_exp(w)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        V = (np.eye(3) + (1 - np.cos(theta)) / theta**2 * K
             + (theta - np.sin(theta)) / theta**3 * K @ K)
    return R, V @ v


def compose(a: CameraPose, b: CameraPose) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    Ra, Rb = a.R, b.R
    return RigidTransform.from_rt(Ra @ Rb, Ra @ b.trans + a.trans)


def relative_pose(a: CameraPose, b: CameraPose) -> RigidTransform:
    """Transform from camera-a coordinates to camera-b coordinates, ``T_b ∘ T_a^-1``."""
    return compose(b, a.inverse())


def perturb_left(pose: CameraPose, xi) -> CameraPose:
    """``exp(xi) ∘ pose``; result keeps the type of ``pose``."""
    dR, dt = se3_exp(xi)
    R = dR @ pose.R
    return type(pose).from_rt(R, dR @ pose.trans + dt)


def _camera_dirs(k: CameraIntrinsics, u, v):
    r = np.stack([(np.asarray(u, dtype=np.float64) + 0.5 - k.cx) / k.fx,
                  (np.asarray(v, dtype=np.float64) + 0.5 - k.cy) / k.fy,
                  np.ones(np.broadcast(u, v).shape)], axis=-1)
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def pixel_ray(k: CameraIntrinsics, pose: CameraPose, u, v):
    """World-frame ray ``(origin, unit direction)`` through the center of pixel ``(u, v)``."""
    d_cam = _camera_dirs(k, u, v)
    return pose.center, pose.R.T @ d_cam


def pixel_rays(k: CameraIntrinsics, pose: CameraPose, u, v):
    """Vectorized :func:`pixel_ray`; ``u, v`` integer arrays of equal shape."""
    d_cam = _camera_dirs(k, u, v)
    return pose.center, d_cam @ pose.R


@dataclass(frozen=True)
class PluckerRayMap:
    """Per-pixel ``(direction, moment)`` with ``moment = origin x direction``."""

    directions: np.ndarray  # (H, W, 3)
    moments: np.ndarray  # (H, W, 3)

    @property
    def shape(self):
        return self.directions.shape[:2]

    def as_array(self) -> np.ndarray:
        """Stacked ``(H, W, 6)`` map."""
        return np.concatenate([self.directions, self.moments], axis=-1)


def plucker_map(k: CameraIntrinsics, pose: CameraPose) -> PluckerRayMap:
    vv, uu = np.mgrid[0:k.height, 0:k.width]
    origin, dirs = pixel_rays(k, pose, uu, vv)
    moments = np.cross(np.broadcast_to(origin, dirs.shape), dirs)
    return PluckerRayMap(_frozen(dirs), _frozen(moments))
