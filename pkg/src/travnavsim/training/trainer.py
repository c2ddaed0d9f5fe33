"""Mini-batch momentum SGD over the stand-in model, evaluation and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
import json
import logging

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import mean_absolute_error
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from ..config import LossConfig
from ..fusion.bev import DepthBins, GridSpec, TraversabilityNet, encode_observation
from ..geometry import CameraModel
from ..io.artifacts import save_json, sha256_file
from .dataset import DatasetError, TrainingTuple, depth_dropout
from .losses import bilinear_sample, in_map, lds_weights, traversability_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "travnav-model/1"


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainingResult:
    model: TraversabilityNet
    history: pd.DataFrame  # epoch, train_loss, val_loss, val_mae
    train_anchors: list[int]
    val_anchors: list[int]


def observations(tup: TrainingTuple, model: TraversabilityNet) -> torch.Tensor:
    """(N, K+D, H, W) encoder inputs for a tuple."""
    return torch.stack(
        [encode_observation(tup.material[t], tup.surface_depth[t], model.bins, model.num_classes) for t in range(tup.N)]
    )


def _check_compatible(tup: TrainingTuple, model: TraversabilityNet) -> None:
    cam = model.camera
    N, H, W = tup.material.shape
    if (H, W) != (cam.height, cam.width):
        raise DatasetError(f"tuple {tup.anchor}: images are {W}x{H}, model camera is {cam.width}x{cam.height}")
    for name in ("surface_depth", "depth_inputs", "depth_targets"):
        if getattr(tup, name).shape != (N, H, W):
            raise DatasetError(f"tuple {tup.anchor}: {name} has shape {getattr(tup, name).shape}, expected {(N, H, W)}")
    if tup.extrinsics.shape != (N, 4, 4) or tup.intrinsics.shape != (N, 4):
        raise DatasetError(f"tuple {tup.anchor}: camera arrays do not cover its {N} frames")
    if tup.label_poses.ndim != 2 or tup.label_poses.shape[1] != 3 or tup.label_trav.shape != (tup.label_poses.shape[0], 2):
        raise DatasetError(f"tuple {tup.anchor}: label arrays are inconsistent")
    if not np.allclose(tup.intrinsics, cam.intrinsics):
        raise DatasetError(f"tuple {tup.anchor}: intrinsics differ from the model camera")


def _split(n: int, cfg: LossConfig) -> tuple[list[int], list[int]]:
    idx = list(range(n))
    if n < 2 or cfg.val_fraction <= 0:
        return idx, idx
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        return idx, idx
    tr, va = train_test_split(idx, test_size=n_val, random_state=cfg.rng_seed, shuffle=True)
    return sorted(tr), sorted(va)


def label_errors(model: TraversabilityNet, tup: TrainingTuple, obs: torch.Tensor | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted vs labelled (mu, nu) at the in-map label poses."""
    obs = observations(tup, model) if obs is None else obs
    with torch.no_grad():
        probs, _ = model(obs, tup.depth_inputs, tup.extrinsics)
        pred = bilinear_sample(probs, tup.label_poses, model.spec).numpy()
    keep = in_map(tup.label_poses, model.spec)
    return pred[keep], tup.label_trav[keep]


def train(
    dataset: Sequence[TrainingTuple],
    model: TraversabilityNet,
    cfg: LossConfig,
    progress: bool = True,
) -> TrainingResult:
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    for t in dataset:
        _check_compatible(t, model)
    tr_idx, va_idx = _split(len(dataset), cfg)
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)

    obs = [observations(t, model) for t in dataset]
    two_m = dataset[0].label_trav.shape[0]
    w_all = lds_weights(np.concatenate([dataset[i].label_trav for i in tr_idx]), cfg)
    weights = {i: w_all[j * two_m : (j + 1) * two_m] for j, i in enumerate(tr_idx)}
    ones = np.ones((two_m, 2))

    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    rows = []
    bs = max(1, int(cfg.batch_size))
    logger.info("=== Training %s: %d train / %d val tuples ===", model.variant, len(tr_idx), len(va_idx))
    for epoch in tqdm(range(cfg.epochs), desc="epochs", disable=not progress):
        order = rng.permutation(tr_idx)
        batch_losses = []
        for b0 in range(0, len(order), bs):
            batch = order[b0 : b0 + bs]
            opt.zero_grad()
            total = None
            for i in batch:
                tup = depth_dropout(dataset[i], cfg.depth_dropout_p, rng)
                probs, logits = model(obs[i], tup.depth_inputs, tup.extrinsics)
                terms = traversability_loss(probs, logits, tup, weights[i], cfg, model.spec, model.bins)
                total = terms.total if total is None else total + terms.total
            loss = total / len(batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b0 // bs}: {float(loss)}")
            loss.backward()
            opt.step()
            batch_losses.append(float(loss))

        val_loss, preds, labels = 0.0, [], []
        with torch.no_grad():
            for i in va_idx:
                tup = dataset[i]
                probs, logits = model(obs[i], tup.depth_inputs, tup.extrinsics)
                val_loss += float(traversability_loss(probs, logits, tup, ones, cfg, model.spec, model.bins).total)
                p, y = label_errors(model, tup, obs[i])
                preds.append(p)
                labels.append(y)
        val_loss /= len(va_idx)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        P, Y = np.concatenate(preds), np.concatenate(labels)
        mae = float(mean_absolute_error(Y, P)) if len(Y) else float("nan")
        rows.append({"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_loss": val_loss, "val_mae": mae})
        logger.debug("epoch %d: train %.5f val %.5f mae %.4f", epoch, rows[-1]["train_loss"], val_loss, mae)

    history = pd.DataFrame(rows, columns=["epoch", "train_loss", "val_loss", "val_mae"])
    if len(history):
        logger.info("  final train loss %.5f, val mae %.4f", history["train_loss"].iloc[-1], history["val_mae"].iloc[-1])
    return TrainingResult(
        model,
        history,
        [dataset[i].anchor for i in tr_idx],
        [dataset[i].anchor for i in va_idx],
    )


def evaluate(dataset: Sequence[TrainingTuple], model: TraversabilityNet, label: str = "") -> pd.DataFrame:
    """Per-tuple mean absolute traversability error (both channels)."""
    rows = []
    for tup in dataset:
        _check_compatible(tup, model)
        p, y = label_errors(model, tup)
        rows.append(
            {
                "model": label or model.variant,
                "variant": model.variant,
                "anchor": tup.anchor,
                "n_labels": int(len(y)),
                "mae": float(mean_absolute_error(y, p)) if len(y) else float("nan"),
                "mae_mu": float(np.mean(np.abs(y[:, 0] - p[:, 0]))) if len(y) else float("nan"),
                "mae_nu": float(np.mean(np.abs(y[:, 1] - p[:, 1]))) if len(y) else float("nan"),
            }
        )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.bin (little-endian float64) + <stem>.json
# ---------------------------------------------------------------------------


def save_model(model: TraversabilityNet, path: str | Path) -> Path:
    p = Path(path)
    stem = p.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    params, offset, chunks = [], 0, []
    for name, t in model.state_dict().items():
        a = t.detach().numpy().astype("<f8").ravel()
        params.append({"name": name, "shape": list(t.shape), "offset": offset, "size": int(a.size)})
        offset += int(a.size)
        chunks.append(a)
    bin_path = stem.with_suffix(".bin")
    (np.concatenate(chunks) if chunks else np.zeros(0, "<f8")).tofile(bin_path)
    desc = {
        "format": CHECKPOINT_FORMAT,
        "settings": model.settings(),
        "params": params,
        "total": offset,
        "bin": bin_path.name,
        "sha256": sha256_file(bin_path),
    }
    json_path = save_json(desc, stem.with_suffix(".json"))
    logger.info("  → %s (%d parameters)", bin_path, offset)
    return json_path


def load_model(path: str | Path) -> TraversabilityNet:
    p = Path(path)
    json_path = p.with_suffix(".json")
    if not json_path.exists():
        raise FileNotFoundError(f"model descriptor not found: {json_path}")
    desc = json.loads(json_path.read_text(encoding="utf-8"))
    if desc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{json_path}: unsupported model format {desc.get('format')!r}")
    s = desc["settings"]
    g, b, c = s["grid"], s["bins"], s["camera"]
    model = TraversabilityNet(
        GridSpec(tuple(g["origin"]), g["cell_xy"], g["cell_z"], g["nx"], g["ny"], g["nz"]),
        DepthBins(b["d_min"], b["d_max"], b["count"], b["spacing"]),
        CameraModel(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"]),
        s["num_classes"],
        frames=s["frames"],
        variant=s["variant"],
        fuser_mode=s["fuser"],
    )
    bin_path = json_path.with_name(desc["bin"])
    if desc.get("sha256") and sha256_file(bin_path) != desc["sha256"]:
        raise ValueError(f"{bin_path}: checksum mismatch")
    flat = np.fromfile(bin_path, dtype="<f8")
    if flat.size != desc["total"]:
        raise ValueError(f"{desc['bin']}: expected {desc['total']} values, found {flat.size}")
    state = {
        e["name"]: torch.from_numpy(flat[e["offset"] : e["offset"] + e["size"]].reshape(e["shape"]).copy())
        for e in desc["params"]
    }
    model.load_state_dict(state)
    return model
