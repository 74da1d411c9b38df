"""Rigid SE(3) poses, ego-motion alignment and pinhole projection.

Conventions used throughout the package:

* A :class:`Pose` maps ego-frame coordinates at its timestamp to global
  coordinates.
* Object centres are stored in the ego frame of their own timestamp.
* Velocities are 2-D, in the global horizontal plane, metres per second.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from querystream.errors import InvariantError

RIGID_TOL = 1e-9


def _check_rigid(m: np.ndarray) -> None:
    if m.shape != (4, 4):
        raise InvariantError(f"pose matrix must be 4x4, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvariantError("pose matrix has non-finite entries")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvariantError(f"pose bottom row must be (0,0,0,1), got {m[3].tolist()}")
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > RIGID_TOL:
        raise InvariantError("pose rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > RIGID_TOL:
        raise InvariantError("pose rotation has det != +1")


class Pose:
    """4x4 homogeneous rigid transform (ego -> global)."""

    __slots__ = ("matrix",)

    def __init__(self, matrix, validate: bool = True):
        m = np.array(matrix, dtype=np.float64)
        if validate:
            _check_rigid(m)
        m.setflags(write=False)
        self.matrix = m

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4), validate=False)

    @classmethod
    def from_rt(cls, rotation, translation) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def translation(cls, x: float, y: float, z: float = 0.0) -> "Pose":
        return cls.from_rt(np.eye(3), (x, y, z))

    @classmethod
    def from_yaw(cls, yaw: float, x: float = 0.0, y: float = 0.0, z: float = 0.0) -> "Pose":
        return cls.from_rt(rot_z(yaw), (x, y, z))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.matrix[1, 0], self.matrix[0, 0]))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.matrix @ other.matrix, validate=False)

    def apply(self, points) -> np.ndarray:
        return transform_points(self.matrix, points)

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def __eq__(self, other) -> bool:
        return isinstance(other, Pose) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return hash(self.matrix.tobytes())

    def __repr__(self) -> str:
        return f"Pose(yaw={self.yaw:.4f}, t={self.t.round(4).tolist()})"


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a normalised random quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: np.random.Generator, scale: float = 50.0) -> Pose:
    return Pose.from_rt(random_rotation(rng), rng.uniform(-scale, scale, size=3))


def rigid_inverse(m: np.ndarray) -> np.ndarray:
    """Closed-form inverse of one or a stack of rigid 4x4 matrices."""
    r = m[..., :3, :3]
    t = m[..., :3, 3:]
    rt = np.swapaxes(r, -1, -2)
    out = np.zeros_like(m)
    out[..., :3, :3] = rt
    out[..., :3, 3:] = -rt @ t
    out[..., 3, 3] = 1.0
    return out


def transform_points(m: np.ndarray, points) -> np.ndarray:
    """Apply a 4x4 matrix (or a stack matching the points) to ``[..., 3]`` points."""
    p = np.asarray(points, dtype=np.float64)
    if m.ndim == 2:
        return p @ m[:3, :3].T + m[:3, 3]
    return np.einsum("...ij,...j->...i", m[..., :3, :3], p) + m[..., :3, 3]


def pose_inverse(p: Pose) -> Pose:
    return Pose(rigid_inverse(p.matrix), validate=False)


def relative_ego_pose(e_prev: Pose, e_cur: Pose) -> Pose:
    """Transform from the ego frame at ``t-1`` to the ego frame at ``t``."""
    return Pose(rigid_inverse(e_cur.matrix) @ e_prev.matrix, validate=False)


def relative_ego_poses(e_prev: np.ndarray, e_cur: Pose) -> np.ndarray:
    """Stacked variant of :func:`relative_ego_pose` for ``[M, 4, 4]`` inputs."""
    return rigid_inverse(e_cur.matrix) @ e_prev


def align_centers(points, rel: Pose | np.ndarray) -> np.ndarray:
    """Move static centres from the previous ego frame into the current one."""
    m = rel.matrix if isinstance(rel, Pose) else rel
    return transform_points(m, points)


def linear_motion_compensate(center, v, e_prev: Pose, e_cur: Pose, dt: float) -> np.ndarray:
    """Constant-velocity extrapolation of centres across an ego-pose change.

    ``center`` is ``[3]`` or ``[M, 3]`` in the previous ego frame, ``v`` is
    ``[2]`` or ``[M, 2]`` global horizontal velocity and ``dt >= 0``.
    """
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    p = transform_points(e_prev.matrix, center)
    vv = np.asarray(v, dtype=np.float64)
    shift = np.zeros(p.shape)
    shift[..., 0] = vv[..., 0] * dt
    shift[..., 1] = vv[..., 1] * dt
    return transform_points(rigid_inverse(e_cur.matrix), p + shift)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera rigidly mounted on the ego vehicle."""

    extrinsic: Pose  # ego -> camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def looking(cls, yaw: float, fov_deg: float = 90.0, width: int = 320, height: int = 160) -> "Camera":
        """Camera at the ego origin whose optical axis points along ``yaw``.

        Camera axes: x right, y down, z forward.  Ego axes: x forward, y left,
        z up.
        """
        axes = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        rot = axes @ rot_z(yaw).T
        f = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
        return cls(Pose.from_rt(rot, np.zeros(3)), f, f, width / 2.0, height / 2.0, width, height)

    def to_dict(self) -> dict:
        return {
            "extrinsic": self.extrinsic.matrix.reshape(-1).tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            Pose(np.asarray(d["extrinsic"], dtype=np.float64).reshape(4, 4)),
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


def project_point(p, cam: Camera) -> Optional[tuple[float, float, float]]:
    """Pixel ``(u, v, depth)`` of an ego-frame point, or ``None`` if unseen."""
    x, y, z = transform_points(cam.extrinsic.matrix, p)
    if z <= 0:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return float(u), float(v), float(z)
