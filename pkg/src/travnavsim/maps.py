"""Two-channel traversability maps and bilinear lookup.

A map is a regular grid of cells; cell (iy, ix) has its centre at
``origin + (ix + 0.5, iy + 0.5) * cell``. Bilinear interpolation runs between
cell centres and clamps to the border values outside the grid, which makes
every query total (rollouts may leave the local map).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class TraversabilityMap:
    origin: tuple[float, float]
    cell: float
    mu: np.ndarray  # (ny, nx), linear traversability
    nu: np.ndarray  # (ny, nx), angular traversability

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        nu = np.array(self.nu, dtype=float)
        if mu.ndim != 2 or mu.shape != nu.shape:
            raise ValueError(f"map channels must be 2-D and share a shape, got {mu.shape} and {nu.shape}")
        if mu.size == 0:
            raise ValueError("map must have at least one cell")
        if not self.cell > 0:
            raise ValueError(f"map cell size must be > 0, got {self.cell}")
        for name, ch in (("mu", mu), ("nu", nu)):
            if not np.all(np.isfinite(ch)) or ch.min() < 0.0 or ch.max() > 1.0:
                raise ValueError(f"map channel {name} must hold values in [0, 1]")
        mu.setflags(write=False)
        nu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def uniform(cls, origin, cell: float, shape: tuple[int, int], mu: float, nu: float | None = None):
        nu = mu if nu is None else nu
        return cls(origin, cell, np.full(shape, float(mu)), np.full(shape, float(nu)))

    @property
    def ny(self) -> int:
        return self.mu.shape[0]

    @property
    def nx(self) -> int:
        return self.mu.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        return ox, ox + self.nx * self.cell, oy, oy + self.ny * self.cell

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        ox, oy = self.origin
        xs = ox + (np.arange(self.nx) + 0.5) * self.cell
        ys = oy + (np.arange(self.ny) + 0.5) * self.cell
        return xs, ys

    def contains(self, px, py) -> np.ndarray:
        x0, x1, y0, y1 = self.extent
        px, py = np.asarray(px, dtype=float), np.asarray(py, dtype=float)
        return (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)

    def with_channels(self, mu: np.ndarray, nu: np.ndarray) -> "TraversabilityMap":
        return TraversabilityMap(self.origin, self.cell, mu, nu)

    def sample(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized bilinear lookup of both channels (border-clamped)."""
        idx = _bilinear_index(self, px, py)
        return _interp(self.mu, idx), _interp(self.nu, idx)


class _BilinearIndex(NamedTuple):
    i0: np.ndarray
    i1: np.ndarray
    j0: np.ndarray
    j1: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    inside_x: np.ndarray
    inside_y: np.ndarray


def _bilinear_index(m: TraversabilityMap, px, py) -> _BilinearIndex:
    ox, oy = m.origin
    gx = (np.asarray(px, dtype=float) - ox) / m.cell - 0.5
    gy = (np.asarray(py, dtype=float) - oy) / m.cell - 0.5
    inside_x = (gx > 0.0) & (gx < m.nx - 1)
    inside_y = (gy > 0.0) & (gy < m.ny - 1)
    gx = np.clip(gx, 0.0, m.nx - 1)
    gy = np.clip(gy, 0.0, m.ny - 1)
    i0 = np.clip(np.floor(gx).astype(int), 0, max(m.nx - 2, 0))
    j0 = np.clip(np.floor(gy).astype(int), 0, max(m.ny - 2, 0))
    i1 = np.minimum(i0 + 1, m.nx - 1)
    j1 = np.minimum(j0 + 1, m.ny - 1)
    fx = np.clip(gx - i0, 0.0, 1.0)
    fy = np.clip(gy - j0, 0.0, 1.0)
    return _BilinearIndex(i0, i1, j0, j1, fx, fy, inside_x, inside_y)


def _interp(grid: np.ndarray, b: _BilinearIndex) -> np.ndarray:
    v00 = grid[b.j0, b.i0]
    v10 = grid[b.j0, b.i1]
    v01 = grid[b.j1, b.i0]
    v11 = grid[b.j1, b.i1]
    return (
        (1 - b.fx) * (1 - b.fy) * v00
        + b.fx * (1 - b.fy) * v10
        + (1 - b.fx) * b.fy * v01
        + b.fx * b.fy * v11
    )


@dataclass(frozen=True)
class BilinearSample:
    """Sampled values with their partial derivatives.

    ``corners`` lists the four (iy, ix) cells in the order 00, 10, 01, 11
    (x index first varying); ``corner_weights`` are d value / d cell value for
    each of them, identical for both channels. ``dmu_dp`` and ``dnu_dp`` are
    gradients with respect to the query point (zero along clamped axes).
    """

    mu: float
    nu: float
    corners: tuple[tuple[int, int], ...]
    corner_weights: np.ndarray
    dmu_dp: np.ndarray
    dnu_dp: np.ndarray


def sample_map_bilinear(m: TraversabilityMap, p) -> BilinearSample:
    b = _bilinear_index(m, np.asarray(p[0], dtype=float), np.asarray(p[1], dtype=float))
    i0, i1, j0, j1 = int(b.i0), int(b.i1), int(b.j0), int(b.j1)
    fx, fy = float(b.fx), float(b.fy)
    weights = np.array([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    corners = ((j0, i0), (j0, i1), (j1, i0), (j1, i1))

    def grad(grid):
        v00, v10, v01, v11 = (grid[c] for c in corners)
        gx = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) / m.cell if bool(b.inside_x) else 0.0
        gy = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) / m.cell if bool(b.inside_y) else 0.0
        return np.array([gx, gy]), float(weights @ np.array([v00, v10, v01, v11]))

    dmu, mu = grad(m.mu)
    dnu, nu = grad(m.nu)
    return BilinearSample(mu, nu, corners, weights, dmu, dnu)
