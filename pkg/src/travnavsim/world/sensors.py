"""Simulated GNSS/compass and depth camera.

The depth camera is a ray caster against obstacle geometry. Only obstacles
flagged ``visible_to_depth`` produce depth returns; the ground plane never
does. Alongside the depth image the renderer reports what the camera *sees*:
the material class of the first surface hit (obstacle or ground) and a dense
surface-depth cue, the stand-in appearance channels for the learner.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import SensorNoise
from ..dynamics.kinodynamics import State2D
from ..geometry import Attitude3D, CameraModel, pose_to_transform, wrap_angle
from .sim import Material, Obstacle, World

_EPS = 1e-9


@dataclass(frozen=True)
class Measurement:
    px: float
    py: float
    heading: float  # compass heading, offset included

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.heading])


def sense_pose(pose: State2D, noise: SensorNoise, rng: np.random.Generator) -> Measurement:
    """GNSS position and compass heading (true heading + offset + noise)."""
    exy = rng.normal(0.0, noise.gnss_sigma, size=2)
    eth = rng.normal(0.0, noise.compass_sigma)
    return Measurement(
        float(pose.px + exy[0]),
        float(pose.py + exy[1]),
        float(wrap_angle(pose.theta + noise.compass_offset + eth)),
    )


@dataclass(frozen=True)
class DepthImage:
    """depth: (H, W) z-depth in metres, 0 = invalid.

    material: (H, W) class of the first visible surface (Material codes).
    surface_depth: (H, W) z-depth of that surface including the ground, 0 if none.
    """

    depth: np.ndarray
    material: np.ndarray
    surface_depth: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def to_pgm(self, path: str | Path) -> Path:
        from ..io.artifacts import write_pgm

        mm = np.clip(np.round(self.depth * 1000.0), 0, 65535).astype(np.uint16)
        return write_pgm(path, mm, maxval=65535)


def _ray_box(o, d, lo, hi):
    """Entry parameter of rays o + t d into an axis-aligned box (inf if missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_near = np.full(d.shape[:-1], -np.inf)
        t_far = np.full(d.shape[:-1], np.inf)
        for a in range(3):
            da = d[..., a]
            par = np.abs(da) < 1e-15
            t1 = (lo[a] - o[a]) / da
            t2 = (hi[a] - o[a]) / da
            tmin = np.where(par, np.where((o[a] >= lo[a]) & (o[a] <= hi[a]), -np.inf, np.inf), np.minimum(t1, t2))
            tmax = np.where(par, np.where((o[a] >= lo[a]) & (o[a] <= hi[a]), np.inf, -np.inf), np.maximum(t1, t2))
            t_near = np.maximum(t_near, tmin)
            t_far = np.minimum(t_far, tmax)
    hit = (t_near <= t_far) & (t_near > _EPS)
    return np.where(hit, t_near, np.inf)


def _ray_cylinder(o, d, cx, cy, r, h):
    """Entry parameter into a vertical cylinder z ∈ [0, h] (side or top cap)."""
    ox, oy = o[0] - cx, o[1] - cy
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    a = dx * dx + dy * dy
    b = 2.0 * (dx * ox + dy * oy)
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
        z = o[2] + t_side * dz
        side_ok = (disc >= 0) & (a > 1e-15) & (t_side > _EPS) & (z >= 0.0) & (z <= h)
        t_cap = (h - o[2]) / dz
        xc, yc = ox + t_cap * dx, oy + t_cap * dy
        cap_ok = (np.abs(dz) > 1e-15) & (t_cap > _EPS) & (xc * xc + yc * yc <= r * r)
    t = np.where(side_ok, t_side, np.inf)
    return np.minimum(t, np.where(cap_ok, t_cap, np.inf))


def _obstacle_hits(ob: Obstacle, o, d) -> np.ndarray:
    fp = ob.footprint
    if fp.shape == "circle":
        return _ray_cylinder(o, d, fp.cx, fp.cy, fp.radius, ob.height)
    lo = np.array([fp.cx - fp.hx, fp.cy - fp.hy, 0.0])
    hi = np.array([fp.cx + fp.hx, fp.cy + fp.hy, ob.height])
    return _ray_box(o, d, lo, hi)


def render_depth(
    world: World,
    camera: CameraModel,
    pose: State2D,
    attitude: Attitude3D | None,
    noise: SensorNoise,
    rng: np.random.Generator,
    max_range: float = 10.0,
) -> DepthImage:
    """Ray-cast one camera frame.

    ``camera.extrinsic`` is the camera → robot mount; ``attitude`` tilts the
    body (and with it the camera) relative to level ground.
    """
    ext = camera.extrinsic
    if attitude is not None and (attitude.roll or attitude.pitch):
        R_att = attitude.rotation()
        ext = ext.copy()
        ext[:3, :3] = R_att @ ext[:3, :3]
        ext[:3, 3] = R_att @ ext[:3, 3]
    T_wc = pose_to_transform(pose.px, pose.py, pose.theta) @ ext
    origin = T_wc[:3, 3]
    dirs = camera.pixel_rays() @ T_wc[:3, :3].T  # (H, W, 3), t is z-depth

    H, W = camera.height, camera.width
    t_best = np.full((H, W), np.inf)
    mat = np.full((H, W), int(Material.NONE), dtype=np.int8)
    for ob in world.obstacles:
        if not ob.visible_to_depth or ob.height <= 0:
            continue
        t = _obstacle_hits(ob, origin, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        mat = np.where(closer, np.int8(ob.material), mat)

    depth = np.where(t_best <= max_range, t_best, 0.0)
    mat = np.where(depth > 0, mat, np.int8(Material.NONE))

    # ground-plane returns feed the appearance channels only
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[..., 2] < -1e-15, -origin[2] / dirs[..., 2], np.inf)
    gx = origin[0] + t_ground * dirs[..., 0]
    gy = origin[1] + t_ground * dirs[..., 1]
    ground = (depth == 0) & (t_ground <= max_range) & (t_ground > _EPS)
    ground &= world.contains(np.where(ground, gx, -1.0), np.where(ground, gy, -1.0))
    ground_mat = world.material_at(np.where(ground, gx, 0.0), np.where(ground, gy, 0.0))
    mat = np.where(ground, ground_mat, mat).astype(np.int8)
    surface = np.where(depth > 0, depth, np.where(ground, t_ground, 0.0))

    # noise draws happen unconditionally so rng consumption is independent of the scene
    eps = rng.normal(0.0, noise.depth_sigma, size=(H, W))
    drop = rng.random((H, W)) < noise.depth_dropout_rate
    valid = depth > 0
    noisy = np.where(valid, depth + eps, 0.0)
    noisy = np.where(drop | (noisy <= 0), 0.0, noisy)
    return DepthImage(noisy, mat, surface)
