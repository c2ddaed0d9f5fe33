"""Rigid transforms and the pinhole camera model.

Frames
------
- world: x east, y north, z up; ground plane at z = 0.
- robot: x forward, y left, z up, origin on the ground below the robot centre.
- camera (optical): z forward, x right, y down.

Depth values are z-depth along the optical axis. A ray through pixel (u, v)
is ``[(u - cx)/fx, (v - cy)/fy, 1]`` in the camera frame, so the ray
parameter at a hit *is* the z-depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .config import CameraSpec

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Normalize angle(s) to [-pi, pi)."""
    if np.ndim(a):
        out = (np.asarray(a, dtype=float) + math.pi) % TWO_PI - math.pi
        return np.where(out >= math.pi, out - TWO_PI, out)
    out = (float(a) + math.pi) % TWO_PI - math.pi
    # fmod rounding can land exactly on +pi for inputs just below -pi
    return out - TWO_PI if out >= math.pi else out


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# camera optical axes expressed in the robot frame (zero pitch, zero yaw)
_OPTICAL_TO_ROBOT = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def make_transform(R: np.ndarray, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = np.asarray(t, dtype=float)
    return T


def invert_transform(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def is_rigid(T: np.ndarray, atol: float = 1e-9) -> bool:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        return False
    R = T[:3, :3]
    return (
        np.allclose(R.T @ R, np.eye(3), atol=atol)
        and abs(np.linalg.det(R) - 1.0) < atol
        and np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=atol)
    )


def pose_to_transform(px: float, py: float, theta: float) -> np.ndarray:
    """SE(2) pose lifted to SE(3) (rotation about z, z translation 0)."""
    return make_transform(rot_z(theta), [px, py, 0.0])


def relative_pose(reference, pose) -> tuple[float, float, float]:
    """Express ``pose`` (px, py, theta) in the frame of ``reference``."""
    rx, ry, rt = reference
    dx, dy = pose[0] - rx, pose[1] - ry
    c, s = math.cos(rt), math.sin(rt)
    return (c * dx + s * dy, -s * dx + c * dy, float(wrap_angle(pose[2] - rt)))


@dataclass(frozen=True)
class Attitude3D:
    """Body roll/pitch relative to level ground (flat terrain by default)."""

    roll: float = 0.0
    pitch: float = 0.0

    def rotation(self) -> np.ndarray:
        return rot_x(self.roll) @ rot_y(self.pitch)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera resolution must be positive, got {self.width}x{self.height}")
        ext = np.asarray(self.extrinsic, dtype=float)
        if not is_rigid(ext):
            raise ValueError("camera extrinsic must be a rigid transform (orthonormal rotation)")
        ext = ext.copy()
        ext.setflags(write=False)
        object.__setattr__(self, "extrinsic", ext)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def with_extrinsic(self, extrinsic: np.ndarray) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsic)

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) unnormalized camera-frame rays with unit z component."""
        u = np.arange(self.width, dtype=float)
        v = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        return np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) → (..., 3) of (u, v, depth)."""
        p = np.asarray(points, dtype=float)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy, z], axis=-1)

    def backproject(self, uvd: np.ndarray) -> np.ndarray:
        """(..., 3) of (u, v, depth) → camera-frame points."""
        q = np.asarray(uvd, dtype=float)
        d = q[..., 2]
        return np.stack(
            [(q[..., 0] - self.cx) / self.fx * d, (q[..., 1] - self.cy) / self.fy * d, d], axis=-1
        )


def mount_extrinsic(spec: CameraSpec, attitude: Attitude3D | None = None) -> np.ndarray:
    """Camera → robot transform from the mounting pose and body attitude."""
    R_mount = rot_z(math.radians(spec.yaw_deg)) @ rot_y(math.radians(spec.pitch_deg)) @ _OPTICAL_TO_ROBOT
    t_mount = np.array([spec.mount_x, 0.0, spec.mount_height])
    att = (attitude or Attitude3D()).rotation()
    return make_transform(att @ R_mount, att @ t_mount)


def camera_from_spec(spec: CameraSpec, attitude: Attitude3D | None = None) -> CameraModel:
    """Square pixels; principal point at (W/2, H/2) so that pixel (W/2, H/2) lies on the axis."""
    fx = (spec.width / 2.0) / math.tan(math.radians(spec.hfov_deg) / 2.0)
    return CameraModel(
        fx=fx,
        fy=fx,
        cx=spec.width / 2.0,
        cy=spec.height / 2.0,
        width=int(spec.width),
        height=int(spec.height),
        extrinsic=mount_extrinsic(spec, attitude),
    )


def transform_points(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return p @ T[:3, :3].T + T[:3, 3]
