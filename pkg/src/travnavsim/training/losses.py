"""Loss terms: LDS label weights, differentiable map sampling, traversability + depth CE."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter1d

from ..config import LossConfig
from ..fusion.bev import DepthBins, GridSpec
from ..maps import sample_map_bilinear as sample_map_bilinear  # re-export
from .dataset import TrainingTuple


def _lds_channel(labels: np.ndarray, bins: int, sigma: float) -> np.ndarray:
    idx = np.clip(np.floor(labels * bins).astype(int), 0, bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(float)
    eff = gaussian_filter1d(hist, sigma, mode="reflect") if sigma > 0 else hist
    w = 1.0 / eff[idx]
    return w / w.mean()


def lds_weights(labels, cfg: LossConfig) -> np.ndarray:
    """Inverse effective-density weights, mean 1; columns of a 2-D array are weighted separately."""
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        raise ValueError("lds_weights needs at least one label")
    if not np.all(np.isfinite(y)) or y.min() < 0.0 or y.max() > 1.0:
        raise ValueError("labels must lie in [0, 1]")
    if y.ndim == 1:
        return _lds_channel(y, cfg.lds_bins, cfg.lds_kernel_sigma)
    return np.stack([_lds_channel(y[:, c], cfg.lds_bins, cfg.lds_kernel_sigma) for c in range(y.shape[1])], axis=1)


def bilinear_sample(probs: torch.Tensor, points, spec: GridSpec) -> torch.Tensor:
    """Sample (C, ny, nx) map channels at robot-frame (P, 2) points → (P, C).

    Interpolates between cell centres and clamps at the border, like
    ``TraversabilityMap.sample``; differentiable in ``probs``.
    """
    pts = torch.as_tensor(np.asarray(points, dtype=float)[:, :2], dtype=probs.dtype)
    gx = (pts[:, 0] - spec.origin[0]) / spec.cell_xy - 0.5
    gy = (pts[:, 1] - spec.origin[1]) / spec.cell_xy - 0.5
    xn = 2.0 * gx / max(spec.nx - 1, 1) - 1.0
    yn = 2.0 * gy / max(spec.ny - 1, 1) - 1.0
    grid = torch.stack([xn, yn], dim=-1).view(1, 1, -1, 2)
    out = F.grid_sample(probs.unsqueeze(0), grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[0, :, 0, :].T


def in_map(points, spec: GridSpec) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    x0, y0 = spec.origin[0], spec.origin[1]
    return (
        (p[:, 0] >= x0)
        & (p[:, 0] <= x0 + spec.nx * spec.cell_xy)
        & (p[:, 1] >= y0)
        & (p[:, 1] <= y0 + spec.ny * spec.cell_xy)
    )


def depth_targets(depth: np.ndarray, bins: DepthBins) -> torch.Tensor:
    """Depth images → bin-index targets; -1 marks invalid pixels."""
    return torch.from_numpy(bins.index(depth))


class LossTerms(NamedTuple):
    total: torch.Tensor
    traversability: torch.Tensor
    depth: torch.Tensor


def traversability_loss(
    probs: torch.Tensor,
    depth_logits: torch.Tensor,
    tup: TrainingTuple,
    weights,
    cfg: LossConfig,
    spec: GridSpec,
    bins: DepthBins,
) -> LossTerms:
    """(1/2M) Σ_i w_i·|trav_i − map(x_i)| + λ·mean CE over valid depth pixels.

    ``weights`` is (2M,) or (2M, 2); labels outside the map get weight 0.
    The CE term covers the frames the model used (the last
    ``depth_logits.shape[0]``).
    """
    two_m = tup.label_poses.shape[0]
    pred = bilinear_sample(probs, tup.label_poses, spec)
    target = torch.as_tensor(tup.label_trav, dtype=probs.dtype)
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = np.repeat(w[:, None], 2, axis=1)
    w = w * in_map(tup.label_poses, spec)[:, None]
    trav = (torch.as_tensor(w, dtype=probs.dtype) * (target - pred).abs()).sum() / two_m

    if cfg.lambda_depth > 0:
        used = depth_logits.shape[0]
        tgt = depth_targets(tup.depth_targets[-used:], bins)
        n_valid = int((tgt >= 0).sum())
        if n_valid:
            ce = F.cross_entropy(depth_logits, tgt, ignore_index=-1, reduction="sum") / n_valid
        else:
            ce = probs.new_zeros(())
    else:
        ce = probs.new_zeros(())
    return LossTerms(trav + cfg.lambda_depth * ce, trav, ce)
