"""Self-supervised training tuples.

An anchor step k yields one tuple:

- the N camera frames k-(N-1)*stride, ..., k-stride, k (appearance channels,
  depth inputs for the occupancy branch, depth targets for the CE term);
- per-frame extrinsics mapping that frame's camera into the robot frame at k,
  composed from the *estimated* poses;
- 2M label steps k-M+1 .. k+M: poses re-expressed in the frame of pose k and
  their (mu, nu) labels.

An anchor is valid when its whole history and the M-1 label steps before
the first history frame lie inside the log, and M label steps follow it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence
import logging
import zipfile

import numpy as np

from ..estimation.mhe import LabelRecord
from ..geometry import invert_transform, pose_to_transform, relative_pose
from ..io.artifacts import save_json, sha256_file

logger = logging.getLogger(__name__)

DATASET_FORMAT = "travnav-tuples/1"


class DatasetError(ValueError):
    """Missing, empty or inconsistent dataset."""


@dataclass(frozen=True)
class SensorFrame:
    tick: int
    material: np.ndarray  # (H, W) int8
    surface_depth: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), 0 = invalid
    extrinsic: np.ndarray  # (4, 4) camera → robot mount
    intrinsics: np.ndarray  # (fx, fy, cx, cy)


@dataclass(frozen=True)
class TrainingTuple:
    anchor: int
    material: np.ndarray  # (N, H, W)
    surface_depth: np.ndarray  # (N, H, W)
    depth_inputs: np.ndarray  # (N, H, W)
    depth_targets: np.ndarray  # (N, H, W)
    extrinsics: np.ndarray  # (N, 4, 4) frame camera → robot at anchor
    intrinsics: np.ndarray  # (N, 4)
    label_poses: np.ndarray  # (2M, 3) in the anchor frame
    label_trav: np.ndarray  # (2M, 2)
    depth_dropped: bool = False

    @property
    def N(self) -> int:
        return int(self.material.shape[0])

    @property
    def M(self) -> int:
        return int(self.label_poses.shape[0]) // 2


@dataclass
class BuildDiagnostics:
    log_length: int
    history_span: int
    candidates: int = 0
    built: int = 0
    skipped_context: int = 0
    skipped_unconverged: int = 0
    anchors: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("anchors")
        return d


def history_span(N: int, stride: int) -> int:
    return (N - 1) * stride + 1


def expected_tuple_count(L: int, N: int, M: int, stride: int = 1) -> int:
    return max(0, L - history_span(N, stride) - 2 * M + 2)


def build_dataset(
    labels: Sequence[LabelRecord],
    frames: Sequence[SensorFrame],
    N: int,
    M: int,
    stride: int = 1,
) -> tuple[list[TrainingTuple], BuildDiagnostics]:
    if len(labels) != len(frames):
        raise DatasetError(f"label log ({len(labels)}) and sensor log ({len(frames)}) are not time-aligned")
    if N < 1 or M < 1 or stride < 1:
        raise ValueError(f"N, M and stride must be >= 1, got {N}, {M}, {stride}")
    L = len(labels)
    span = history_span(N, stride)
    diag = BuildDiagnostics(L, span)
    first = (span - 1) + (M - 1)
    last = L - 1 - M
    diag.skipped_context = L - max(0, last - first + 1)
    poses = np.array([r.state.as_array() for r in labels]) if L else np.zeros((0, 3))
    trav = np.array([[r.mu, r.nu] for r in labels]) if L else np.zeros((0, 2))
    out: list[TrainingTuple] = []
    for k in range(first, last + 1):
        diag.candidates += 1
        lab = range(k - M + 1, k + M + 1)
        if not all(labels[i].converged for i in lab):
            diag.skipped_unconverged += 1
            continue
        hist = [k - (N - 1 - j) * stride for j in range(N)]
        T_k_inv = invert_transform(pose_to_transform(*poses[k]))
        ext = np.stack([T_k_inv @ pose_to_transform(*poses[t]) @ frames[t].extrinsic for t in hist])
        out.append(
            TrainingTuple(
                anchor=k,
                material=np.stack([frames[t].material for t in hist]).astype(np.int8),
                surface_depth=np.stack([frames[t].surface_depth for t in hist]).astype(float),
                depth_inputs=np.stack([frames[t].depth for t in hist]).astype(float),
                depth_targets=np.stack([frames[t].depth for t in hist]).astype(float),
                extrinsics=ext,
                intrinsics=np.stack([np.asarray(frames[t].intrinsics, dtype=float) for t in hist]),
                label_poses=np.array([relative_pose(poses[k], poses[i]) for i in lab]),
                label_trav=trav[list(lab)].copy(),
            )
        )
        diag.anchors.append(k)
    diag.built = len(out)
    if diag.skipped_unconverged:
        logger.warning("build_dataset: %d anchors skipped (estimator did not converge)", diag.skipped_unconverged)
    return out, diag


def depth_dropout(tup: TrainingTuple, p: float, rng: np.random.Generator) -> TrainingTuple:
    """With probability p blank the occupancy-branch depth inputs; targets are kept."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    if rng.random() < p:
        return replace(tup, depth_inputs=np.zeros_like(tup.depth_inputs), depth_dropped=True)
    return tup


_ARRAY_FIELDS = (
    "material",
    "surface_depth",
    "depth_inputs",
    "depth_targets",
    "extrinsics",
    "intrinsics",
    "label_poses",
    "label_trav",
)


def _write_npz(path: Path, arrays: dict) -> None:
    """``np.savez`` layout with fixed member timestamps, so equal tuples hash equally."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)


def save_dataset(tuples: Sequence[TrainingTuple], directory: str | Path, meta: dict | None = None) -> Path:
    """One ``.npz`` per tuple plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(tuples):
        name = f"tuple_{i:05d}.npz"
        _write_npz(d / name, {"anchor": np.int64(t.anchor), **{f: getattr(t, f) for f in _ARRAY_FIELDS}})
        entries.append({"file": name, "anchor": t.anchor, "sha256": sha256_file(d / name)})
    manifest = {
        "format": DATASET_FORMAT,
        "count": len(entries),
        "N": tuples[0].N if tuples else None,
        "M": tuples[0].M if tuples else None,
        "tuples": entries,
        **(meta or {}),
    }
    save_json(manifest, d / "manifest.json")
    logger.info("  → %s (%d tuples)", d, len(entries))
    return d / "manifest.json"


def load_dataset(directory: str | Path, verify: bool = True) -> tuple[list[TrainingTuple], dict]:
    """Read tuples listed in ``manifest.json``; ``verify`` checks each file against its sha256."""
    import json

    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{mpath}: unsupported dataset format {manifest.get('format')!r}")
    out = []
    for e in manifest["tuples"]:
        p = d / e["file"]
        if not p.exists():
            raise DatasetError(f"dataset file missing: {p}")
        if verify and e.get("sha256") and sha256_file(p) != e["sha256"]:
            raise DatasetError(f"checksum mismatch for {p}")
        with np.load(p) as z:
            out.append(TrainingTuple(anchor=int(z["anchor"]), **{f: z[f] for f in _ARRAY_FIELDS}))
    return out, manifest
