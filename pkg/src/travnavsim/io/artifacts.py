"""Artifact writers: JSON, CSV tables, PGM images and traversability maps."""

from __future__ import annotations

from pathlib import Path
import hashlib
import json
import logging

import numpy as np
import pandas as pd

from ..maps import TraversabilityMap

logger = logging.getLogger(__name__)


def _ensure_path(p: str | Path) -> Path:
    return p if isinstance(p, Path) else Path(p)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"Object of type {type(o).__name__} is not JSON serializable")


def save_json(data, path: str | Path, indent: int = 2) -> Path:
    path = _ensure_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, indent=indent, ensure_ascii=False, default=_json_default),
        encoding="utf-8",
    )
    return path


def sha256_file(path: str | Path, chunk_size: int = 1 << 20) -> str:
    path = _ensure_path(path)
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            h.update(chunk)
    return h.hexdigest()


def save_table(df: pd.DataFrame, path: str | Path, decimals: int = 6) -> Path:
    """CSV with numeric columns rounded."""
    path = _ensure_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    num = df.select_dtypes(include=[np.number]).columns
    out = df.copy()
    out[num] = out[num].round(decimals)
    out.to_csv(path, index=False)
    logger.info("  → %s (%d rows)", path, len(out))
    return path


def write_pgm(path: str | Path, image: np.ndarray, maxval: int = 255) -> Path:
    """Binary (P5) greyscale image; 16-bit samples are written big-endian."""
    path = _ensure_path(path)
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {img.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"PGM maxval must be in [1, 65535], got {maxval}")
    dtype = ">u1" if maxval < 256 else ">u2"
    data = np.clip(img, 0, maxval).astype(dtype)
    h, w = data.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(data.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    raw = _ensure_path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u1" if maxval < 256 else ">u2"
    # exactly one whitespace byte separates the header from the raster
    data = np.frombuffer(raw[pos + 1 :], dtype=dtype, count=w * h)
    return data.reshape(h, w)


def write_map(tmap: TraversabilityMap, stem: str | Path) -> dict:
    """Write ``<stem>_mu.pgm``, ``<stem>_nu.pgm`` (8-bit, row 0 = lowest y) and ``<stem>.json``."""
    stem = _ensure_path(stem)
    mu_path = write_pgm(stem.with_name(stem.name + "_mu.pgm"), np.round(tmap.mu * 255))
    nu_path = write_pgm(stem.with_name(stem.name + "_nu.pgm"), np.round(tmap.nu * 255))
    sidecar = {
        "origin": list(tmap.origin),
        "cell": tmap.cell,
        "nx": tmap.nx,
        "ny": tmap.ny,
        "mu": mu_path.name,
        "nu": nu_path.name,
        "scale": 1.0 / 255.0,
    }
    save_json(sidecar, stem.with_suffix(".json"))
    return sidecar


def read_map(sidecar_path: str | Path) -> TraversabilityMap:
    p = _ensure_path(sidecar_path)
    meta = json.loads(p.read_text(encoding="utf-8"))
    mu = read_pgm(p.parent / meta["mu"]).astype(float) * meta["scale"]
    nu = read_pgm(p.parent / meta["nu"]).astype(float) * meta["scale"]
    return TraversabilityMap(tuple(meta["origin"]), float(meta["cell"]), mu, nu)
