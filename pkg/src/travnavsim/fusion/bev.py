"""Lift-splat BEV fusion with a small differentiable stand-in model.

Pipeline per frame::

    observation ─► StandInEncoder ─► (context, depth_dist)
                 ─► lift_frustum (outer product over depth bins)
                 ─► splat_to_voxels (sum pooling, robot frame at step k)
    depth image ─► depth_to_occupancy (one extra channel, concatenated)

then a pose-aligned sequence of per-frame grids is fused over time and a
per-cell affine head decodes the two traversability channels.

Everything runs in float64 on the CPU. Voxel indices are computed from the
(non-differentiable) geometry; features flow through ``index_add`` so the
whole chain is differentiable with respect to encoder, fuser and head
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence
import logging
import math

import numpy as np
import pandas as pd
import torch
from torch import nn

from ..config import FUSER_MODES, MODEL_VARIANTS, FusionConfig
from ..geometry import CameraModel, relative_pose, transform_points
from ..maps import TraversabilityMap

logger = logging.getLogger(__name__)

DTYPE = torch.float64
BIN_SPACINGS = ("uniform", "linear_increasing")


class DepthBins:
    """Discretization of [d_min, d_max] into ``count`` depth classes."""

    def __init__(self, d_min: float, d_max: float, count: int, spacing: str = "uniform"):
        if not 0 <= d_min < d_max:
            raise ValueError(f"depth bins need 0 <= d_min < d_max, got {d_min}, {d_max}")
        if count < 2:
            raise ValueError(f"depth bin count must be >= 2, got {count}")
        if spacing not in BIN_SPACINGS:
            raise ValueError(f"bin spacing must be one of {BIN_SPACINGS}, got {spacing!r}")
        self.d_min = float(d_min)
        self.d_max = float(d_max)
        self.count = int(count)
        self.spacing = spacing
        i = np.arange(count + 1, dtype=float)
        if spacing == "uniform":
            frac = i / count
        else:
            # bin width grows linearly with the bin index
            frac = i * (i + 1) / (count * (count + 1))
        self.edges = self.d_min + (self.d_max - self.d_min) * frac
        self.centers = 0.5 * (self.edges[:-1] + self.edges[1:])

    def __repr__(self) -> str:
        return f"DepthBins({self.d_min}, {self.d_max}, {self.count}, {self.spacing!r})"

    def index(self, depth) -> np.ndarray:
        """Bin index per depth value; -1 for invalid (<= 0) or out-of-range depths."""
        d = np.asarray(depth, dtype=float)
        idx = np.searchsorted(self.edges, d, side="right") - 1
        idx = np.where(d == self.d_max, self.count - 1, idx)
        ok = (d > 0) & (d >= self.d_min) & (d <= self.d_max)
        return np.where(ok, idx, -1).astype(np.int64)

    @classmethod
    def from_config(cls, cfg: FusionConfig) -> "DepthBins":
        return cls(cfg.d_min, cfg.d_max, cfg.depth_bins, cfg.bin_spacing)


@dataclass(frozen=True)
class GridSpec:
    """Metric voxel grid in the robot frame; ``origin`` is the min corner."""

    origin: tuple[float, float, float]
    cell_xy: float
    cell_z: float
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if not (self.cell_xy > 0 and self.cell_z > 0):
            raise ValueError(f"voxel sizes must be > 0, got {self.cell_xy}, {self.cell_z}")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError(f"grid dimensions must be > 0, got {self.nx}x{self.ny}x{self.nz}")

    @classmethod
    def from_config(cls, cfg: FusionConfig) -> "GridSpec":
        nx = int(round(cfg.grid_x / cfg.cell_xy))
        ny = int(round(cfg.grid_y / cfg.cell_xy))
        nz = int(round(cfg.grid_z / cfg.cell_z))
        return cls((-cfg.grid_x / 2.0, -cfg.grid_y / 2.0, cfg.z_min), cfg.cell_xy, cfg.cell_z, nx, ny, nz)

    @property
    def num_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.nz, self.ny, self.nx

    def voxel_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(ix, iy, iz, in_bounds) for robot-frame points (P, 3)."""
        p = np.asarray(points, dtype=float)
        ix = np.floor((p[:, 0] - self.origin[0]) / self.cell_xy).astype(np.int64)
        iy = np.floor((p[:, 1] - self.origin[1]) / self.cell_xy).astype(np.int64)
        iz = np.floor((p[:, 2] - self.origin[2]) / self.cell_z).astype(np.int64)
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny) & (iz >= 0) & (iz < self.nz)
        return ix, iy, iz, ok

    def flat_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ix, iy, iz, ok = self.voxel_index(points)
        return (iz * self.ny + iy) * self.nx + ix, ok

    def xy_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.cell_xy
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * self.cell_xy
        return xs, ys


@dataclass
class VoxelGrid:
    """values: tensor (C, nz, ny, nx)."""

    spec: GridSpec
    values: torch.Tensor

    def __post_init__(self):
        if tuple(self.values.shape[1:]) != self.spec.shape:
            raise ValueError(f"grid values {tuple(self.values.shape)} do not match spec {self.spec.shape}")

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    def mass(self) -> float:
        return float(self.values.detach().sum())

    def occupied(self, threshold: float = 0.0) -> np.ndarray:
        """Boolean (nz, ny, nx) mask of voxels with any channel above ``threshold``."""
        return (self.values.detach() > threshold).any(dim=0).numpy()

    def to_frame(self) -> pd.DataFrame:
        """Nonzero voxels as a flat table (debug dump)."""
        v = self.values.detach().numpy()
        nz_mask = np.any(v != 0, axis=0)
        iz, iy, ix = np.nonzero(nz_mask)
        data = {"iz": iz, "iy": iy, "ix": ix}
        for c in range(v.shape[0]):
            data[f"c{c}"] = v[c, iz, iy, ix]
        return pd.DataFrame(data)


@dataclass
class FeatureImage:
    context: torch.Tensor  # (C, H, W)
    depth_dist: torch.Tensor  # (D, H, W)
    depth_logits: torch.Tensor  # (D, H, W)

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.context.shape[1]), int(self.context.shape[2])


@dataclass
class FrustumPointCloud:
    points: np.ndarray  # (P, 3) camera frame, ordered (D, H, W)
    features: torch.Tensor  # (P, C)


def encode_observation(material: np.ndarray, surface_depth: np.ndarray, bins: DepthBins, num_classes: int) -> torch.Tensor:
    """Per-pixel input channels: material one-hot followed by a depth-cue bin one-hot.

    Material code 0 (nothing seen) and pixels without a cue stay all-zero.
    """
    material = np.asarray(material)
    H, W = material.shape
    out = np.zeros((num_classes + bins.count, H, W))
    m = material.astype(np.int64)
    vv, uu = np.nonzero((m > 0) & (m < num_classes))
    out[m[vv, uu], vv, uu] = 1.0
    b = bins.index(surface_depth)
    vv, uu = np.nonzero(b >= 0)
    out[num_classes + b[vv, uu], vv, uu] = 1.0
    return torch.from_numpy(out).to(DTYPE)


class StandInEncoder(nn.Module):
    """One per-pixel affine layer: inputs → (C context channels, D depth logits)."""

    def __init__(self, in_channels: int, context_channels: int, depth_bins: int, width: int, height: int):
        super().__init__()
        self.in_channels = in_channels
        self.context_channels = context_channels
        self.depth_bins = depth_bins
        self.width = width
        self.height = height
        self.net = nn.Conv2d(in_channels, context_channels + depth_bins, kernel_size=1, dtype=DTYPE)

    def identity_init(self, gain: float = 1.0) -> "StandInEncoder":
        """Context copies the leading input channels; depth logits follow the cue channels."""
        with torch.no_grad():
            self.net.weight.zero_()
            self.net.bias.zero_()
            C, D = self.context_channels, self.depth_bins
            for c in range(min(C, self.in_channels)):
                self.net.weight[c, c, 0, 0] = 1.0
            cue0 = self.in_channels - D
            if cue0 >= 0:
                for d in range(D):
                    self.net.weight[C + d, cue0 + d, 0, 0] = gain
        return self

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y = self.net(x)
        return y[:, : self.context_channels], y[:, self.context_channels :]


def extract_features(observation: torch.Tensor, model: StandInEncoder) -> FeatureImage:
    obs = observation if observation.dim() == 4 else observation.unsqueeze(0)
    _, c, h, w = obs.shape
    if (h, w) != (model.height, model.width):
        raise ValueError(f"observation resolution {w}x{h} does not match encoder {model.width}x{model.height}")
    if c != model.in_channels:
        raise ValueError(f"observation has {c} channels, encoder expects {model.in_channels}")
    context, logits = model(obs)
    return FeatureImage(context[0], logits[0].softmax(dim=0), logits[0])


def frustum_points(cam: CameraModel, bins: DepthBins) -> np.ndarray:
    """(D*H*W, 3) camera-frame points at every bin centre, ordered (D, H, W)."""
    rays = cam.pixel_rays()
    pts = bins.centers[:, None, None, None] * rays[None]
    return pts.reshape(-1, 3)


def lift_frustum(
    feat: FeatureImage, bins: DepthBins, cam: CameraModel, points: np.ndarray | None = None
) -> FrustumPointCloud:
    """Outer product of depth distribution and context per pixel; ``points`` reuses a cached frustum."""
    h, w = feat.resolution
    if (h, w) != (cam.height, cam.width):
        raise ValueError(f"feature resolution {w}x{h} does not match camera {cam.width}x{cam.height}")
    # (D, 1, H, W) * (1, C, H, W) → (D, C, H, W)
    lifted = feat.depth_dist.unsqueeze(1) * feat.context.unsqueeze(0)
    C = feat.context.shape[0]
    features = lifted.permute(0, 2, 3, 1).reshape(-1, C)
    return FrustumPointCloud(frustum_points(cam, bins) if points is None else points, features)


def _scatter_sum(features: torch.Tensor, points: np.ndarray, extrinsic: np.ndarray, spec: GridSpec) -> torch.Tensor:
    idx, ok = spec.flat_index(transform_points(extrinsic, points))
    C = features.shape[1]
    keep = torch.from_numpy(np.nonzero(ok)[0])
    flat = torch.zeros(C, spec.num_voxels, dtype=features.dtype)
    flat = flat.index_add(1, torch.from_numpy(idx[ok]), features.index_select(0, keep).T)
    return flat.reshape(C, *spec.shape)


def splat_to_voxels(frustum: FrustumPointCloud, extrinsic: np.ndarray, spec: GridSpec) -> VoxelGrid:
    """Sum-pool frustum features into the voxels containing their robot-frame points."""
    return VoxelGrid(spec, _scatter_sum(frustum.features, frustum.points, extrinsic, spec))


def depth_to_occupancy(depth: np.ndarray, cam: CameraModel, extrinsic: np.ndarray, spec: GridSpec) -> VoxelGrid:
    d = np.asarray(depth, dtype=float)
    valid = d > 0
    occ = torch.zeros(spec.num_voxels, dtype=DTYPE)
    if valid.any():
        pts = cam.pixel_rays()[valid] * d[valid][:, None]
        idx, ok = spec.flat_index(transform_points(extrinsic, pts))
        occ[torch.from_numpy(idx[ok])] = 1.0
    return VoxelGrid(spec, occ.reshape(1, *spec.shape))


def _alignment_index(spec: GridSpec, pose, reference) -> tuple[torch.Tensor, torch.Tensor]:
    """Source xy cell per destination cell for a grid built at ``pose`` viewed from ``reference``."""
    dx, dy, dth = relative_pose(pose, reference)
    xs, ys = spec.xy_centers()
    X, Y = np.meshgrid(xs, ys)
    c, s = math.cos(dth), math.sin(dth)
    sx = c * X - s * Y + dx
    sy = s * X + c * Y + dy
    ix = np.floor((sx - spec.origin[0]) / spec.cell_xy).astype(np.int64)
    iy = np.floor((sy - spec.origin[1]) / spec.cell_xy).astype(np.int64)
    ok = (ix >= 0) & (ix < spec.nx) & (iy >= 0) & (iy < spec.ny)
    src = np.where(ok, iy * spec.nx + ix, 0)
    return torch.from_numpy(src.ravel()), torch.from_numpy(ok.ravel())


def align_grid(grid: VoxelGrid, pose, reference) -> VoxelGrid:
    spec = grid.spec
    src, ok = _alignment_index(spec, pose, reference)
    C = grid.channels
    flat = grid.values.reshape(C, spec.nz, spec.ny * spec.nx)
    out = flat.index_select(2, src) * ok.to(grid.values.dtype)
    return VoxelGrid(spec, out.reshape(C, *spec.shape))


def align_sequence(grids: Sequence[VoxelGrid], poses: Sequence, reference) -> list[VoxelGrid]:
    """Resample each grid (built in the robot frame at its pose) into the reference frame.

    Poses are anything indexable as (px, py, theta); nearest-voxel resampling,
    z passes through, out-of-bounds sources give zeros.
    """
    if len(grids) != len(poses):
        raise ValueError(f"{len(grids)} grids but {len(poses)} poses")
    ref = _as_pose(reference)
    return [align_grid(g, _as_pose(p), ref) for g, p in zip(grids, poses)]


def _as_pose(p) -> tuple[float, float, float]:
    if hasattr(p, "as_array"):
        p = p.as_array()
    return float(p[0]), float(p[1]), float(p[2])


class TemporalFuser(nn.Module):
    """Fuses a (T, C, nz, ny, nx) stack into one grid.

    - ``max``: elementwise maximum over time.
    - ``learnable``: per-channel convex combination, softmax over trainable logits.
    - ``hybrid``: max on the occupancy channels, learnable on the rest.
    """

    def __init__(self, channels: int, frames: int, mode: str = "hybrid", occupancy_channels: Sequence[int] = ()):
        super().__init__()
        if mode not in FUSER_MODES:
            raise ValueError(f"fuser mode must be one of {FUSER_MODES}, got {mode!r}")
        if frames < 1:
            raise ValueError(f"frames must be >= 1, got {frames}")
        self.mode = mode
        self.frames = frames
        self.occupancy_channels = tuple(int(c) for c in occupancy_channels)
        self.logits = nn.Parameter(torch.zeros(channels, frames, dtype=DTYPE))

    def set_weights(self, weights) -> None:
        """Set the convex weights directly, (T,) shared or (C, T); zeros become -inf logits."""
        w = torch.as_tensor(np.asarray(weights, dtype=float), dtype=DTYPE)
        if w.dim() == 1:
            w = w.expand_as(self.logits)
        with torch.no_grad():
            self.logits.copy_(torch.log(w))

    def convex_weights(self, t_in: int) -> torch.Tensor:
        if t_in > self.frames:
            raise ValueError(f"sequence of {t_in} frames exceeds fuser capacity {self.frames}")
        return torch.softmax(self.logits[:, self.frames - t_in :], dim=1)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.shape[0] < 1:
            raise ValueError("cannot fuse an empty sequence")
        if self.mode == "max":
            return stack.max(dim=0).values
        w = self.convex_weights(stack.shape[0])  # (C, T)
        fused = torch.einsum("tc...,ct->c...", stack, w)
        if self.mode == "hybrid" and self.occupancy_channels:
            occ = torch.tensor(self.occupancy_channels, dtype=torch.long)
            fused = fused.index_copy(0, occ, stack.index_select(1, occ).max(dim=0).values)
        return fused


def fuse_temporal(aligned: Sequence[VoxelGrid], fuser: TemporalFuser) -> VoxelGrid:
    if not aligned:
        raise ValueError("cannot fuse an empty sequence")
    spec = aligned[0].spec
    if any(g.spec != spec for g in aligned):
        raise ValueError("all grids must share one spec")
    return VoxelGrid(spec, fuser(torch.stack([g.values for g in aligned])))


def collapse(values: torch.Tensor) -> torch.Tensor:
    """(C, nz, ny, nx) → (C, ny, nx) by summation over z."""
    return values.sum(dim=1)


class StandInHead(nn.Module):
    """Per-cell affine map over channels followed by a sigmoid, two outputs (mu, nu).

    The first ``context_channels`` channels are rescaled to per-cell fractions
    so the head sees what was observed in a cell, not how many pixels fell in it.
    """

    def __init__(self, in_channels: int, context_channels: int, bias_init: float = 0.0):
        super().__init__()
        self.in_channels = in_channels
        self.context_channels = context_channels
        self.net = nn.Conv2d(in_channels, 2, kernel_size=1, dtype=DTYPE)
        with torch.no_grad():
            self.net.weight.zero_()
            self.net.bias.fill_(bias_init)

    def forward(self, bev: torch.Tensor) -> torch.Tensor:
        C = self.context_channels
        ctx = bev[:C]
        ctx = ctx / (ctx.sum(dim=0, keepdim=True) + 1e-6)
        x = torch.cat([ctx, bev[C:]], dim=0)
        return torch.sigmoid(self.net(x.unsqueeze(0))[0])


def decode_probs(fused: VoxelGrid, head: StandInHead) -> torch.Tensor:
    return head(collapse(fused.values))


def probs_to_map(probs: torch.Tensor, spec: GridSpec) -> TraversabilityMap:
    p = probs.detach().numpy()
    return TraversabilityMap((spec.origin[0], spec.origin[1]), spec.cell_xy, np.clip(p[0], 0, 1), np.clip(p[1], 0, 1))


def decode_traversability(fused: VoxelGrid, head: StandInHead) -> TraversabilityMap:
    return probs_to_map(decode_probs(fused, head), fused.spec)


class TraversabilityNet(nn.Module):
    """encoder → lift → splat (+ occupancy) → temporal fusion → head.

    ``extrinsics[t]`` maps frame t's camera into the robot frame at the
    reference step, so per-frame grids come out already aligned.
    """

    def __init__(
        self,
        spec: GridSpec,
        bins: DepthBins,
        camera: CameraModel,
        num_classes: int,
        frames: int = 4,
        variant: str = "temporal",
        fuser_mode: str = "hybrid",
        gain: float = 8.0,
        head_bias: float = 0.0,
    ):
        super().__init__()
        if variant not in MODEL_VARIANTS:
            raise ValueError(f"variant must be one of {MODEL_VARIANTS}, got {variant!r}")
        self.spec = spec
        self.bins = bins
        self.camera = camera
        self.num_classes = num_classes
        self.frames = frames if variant == "temporal" else 1
        self.variant = variant
        C = num_classes
        self.encoder = StandInEncoder(C + bins.count, C, bins.count, camera.width, camera.height).identity_init(gain)
        self.use_occupancy = variant != "vision_only"
        total = C + (1 if self.use_occupancy else 0)
        occ = (C,) if self.use_occupancy else ()
        self.fuser = TemporalFuser(total, self.frames, fuser_mode, occ)
        self.head = StandInHead(total, C, head_bias)
        self._points = frustum_points(camera, bins)

    def settings(self) -> dict:
        return {
            "variant": self.variant,
            "frames": self.frames,
            "fuser": self.fuser.mode,
            "num_classes": self.num_classes,
            "grid": {
                "origin": list(self.spec.origin),
                "cell_xy": self.spec.cell_xy,
                "cell_z": self.spec.cell_z,
                "nx": self.spec.nx,
                "ny": self.spec.ny,
                "nz": self.spec.nz,
            },
            "bins": {"d_min": self.bins.d_min, "d_max": self.bins.d_max, "count": self.bins.count, "spacing": self.bins.spacing},
            "camera": {
                "fx": self.camera.fx,
                "fy": self.camera.fy,
                "cx": self.camera.cx,
                "cy": self.camera.cy,
                "width": self.camera.width,
                "height": self.camera.height,
            },
        }

    def frame_grid(self, observation: torch.Tensor, depth, extrinsic: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        feat = extract_features(observation, self.encoder)
        frustum = lift_frustum(feat, self.bins, self.camera, self._points)
        grid = splat_to_voxels(frustum, extrinsic, self.spec).values
        if self.use_occupancy:
            occ = depth_to_occupancy(_as_numpy(depth), self.camera, extrinsic, self.spec).values
            grid = torch.cat([grid, occ], dim=0)
        return grid, feat.depth_logits

    def forward(self, observations: torch.Tensor, depth_inputs, extrinsics) -> tuple[torch.Tensor, torch.Tensor]:
        """observations (T, Cin, H, W), depth_inputs (T, H, W), extrinsics (T, 4, 4).

        Returns traversability probabilities (2, ny, nx) and the depth logits
        (T_used, D, H, W) of the frames actually used (the last ``frames``).
        """
        T = observations.shape[0]
        used = range(max(0, T - self.frames), T)
        grids, logits = [], []
        for t in used:
            g, lg = self.frame_grid(observations[t], depth_inputs[t], np.asarray(extrinsics[t], dtype=float))
            grids.append(g)
            logits.append(lg)
        fused = self.fuser(torch.stack(grids))
        return self.head(collapse(fused)), torch.stack(logits)

    @torch.no_grad()
    def predict_map(self, observations: torch.Tensor, depth_inputs, extrinsics) -> TraversabilityMap:
        probs, _ = self.forward(observations, depth_inputs, extrinsics)
        return probs_to_map(probs, self.spec)


def _as_numpy(depth) -> np.ndarray:
    if isinstance(depth, torch.Tensor):
        return depth.detach().numpy()
    return np.asarray(depth, dtype=float)


def build_model(cfg: FusionConfig, camera: CameraModel, num_classes: int, seed: int = 0) -> TraversabilityNet:
    torch.manual_seed(seed)
    model = TraversabilityNet(
        GridSpec.from_config(cfg),
        DepthBins.from_config(cfg),
        camera,
        num_classes,
        frames=cfg.frames,
        variant=cfg.variant,
        fuser_mode=cfg.fuser,
        gain=cfg.encoder_gain,
        head_bias=cfg.head_bias_init,
    )
    logger.debug("model %s: %d parameters", cfg.variant, sum(p.numel() for p in model.parameters()))
    return model
