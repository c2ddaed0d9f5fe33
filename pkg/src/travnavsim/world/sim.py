"""Procedural synthetic worlds with ground-truth traction grids.

A world is a rectangle ``[0, width] x [0, height]`` split into square cells.
Each cell carries truth_mu, truth_nu and a material class; obstacles stamp
their traction and material onto the cells their footprint covers. Solid
obstacles are stamped last so their cells always end at zero traction.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple
import logging

import numpy as np

from ..config import ObstacleSpec, OBSTACLE_KINDS, WorldSpec
from ..dynamics.kinodynamics import Control, State2D, step
from ..maps import TraversabilityMap

logger = logging.getLogger(__name__)


class WorldSpecError(ValueError):
    """Raised for invalid world specifications."""


class Material(IntEnum):
    NONE = 0
    GROUND = 1
    BLOCK = 2
    TREE = 3
    GRASS = 4
    DITCH = 5
    MUD = 6


NUM_MATERIALS = len(Material)

SOLID_KINDS = ("solid_block", "solid_cylinder")

# kind → (height, mu, nu, visible_to_depth, material)
_KIND_DEFAULTS = {
    "solid_block": (1.0, 0.0, 0.0, True, Material.BLOCK),
    "solid_cylinder": (2.0, 0.0, 0.0, True, Material.TREE),
    "tall_grass_patch": (0.8, 0.95, 0.9, True, Material.GRASS),
    "ditch": (0.0, 0.0, 0.0, False, Material.DITCH),
    "mud_patch": (0.0, 0.3, 0.3, False, Material.MUD),
}


@dataclass(frozen=True)
class Footprint:
    """Axis-aligned box (centre + half sizes) or vertical circle (centre + radius)."""

    shape: str
    cx: float
    cy: float
    hx: float = 0.0
    hy: float = 0.0
    radius: float = 0.0

    def contains(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if self.shape == "circle":
            return (x - self.cx) ** 2 + (y - self.cy) ** 2 <= self.radius**2
        return (np.abs(x - self.cx) <= self.hx) & (np.abs(y - self.cy) <= self.hy)

    def bounds(self) -> tuple[float, float, float, float]:
        if self.shape == "circle":
            r = self.radius
            return self.cx - r, self.cx + r, self.cy - r, self.cy + r
        return self.cx - self.hx, self.cx + self.hx, self.cy - self.hy, self.cy + self.hy


@dataclass(frozen=True)
class Obstacle:
    kind: str
    footprint: Footprint
    height: float
    mu_override: float
    nu_override: float
    visible_to_depth: bool
    material: Material

    @property
    def solid(self) -> bool:
        return self.kind in SOLID_KINDS


def obstacle_from_spec(spec: ObstacleSpec) -> Obstacle:
    if spec.kind not in OBSTACLE_KINDS:
        raise WorldSpecError(f"unknown obstacle kind {spec.kind!r}; expected one of {OBSTACLE_KINDS}")
    height, mu, nu, visible, material = _KIND_DEFAULTS[spec.kind]
    if spec.kind == "solid_cylinder":
        if not spec.radius > 0:
            raise WorldSpecError(f"cylinder radius must be > 0, got {spec.radius}")
        fp = Footprint("circle", spec.x, spec.y, radius=spec.radius)
    else:
        if not (spec.size_x > 0 and spec.size_y > 0):
            raise WorldSpecError(f"{spec.kind} sizes must be > 0, got {spec.size_x}x{spec.size_y}")
        fp = Footprint("box", spec.x, spec.y, hx=spec.size_x / 2.0, hy=spec.size_y / 2.0)
    if spec.kind in SOLID_KINDS and ((spec.mu or 0.0) != 0.0 or (spec.nu or 0.0) != 0.0):
        raise WorldSpecError(f"{spec.kind} is solid; traction overrides must be 0")
    mu = mu if spec.mu is None else float(spec.mu)
    nu = nu if spec.nu is None else float(spec.nu)
    for name, v in (("mu", mu), ("nu", nu)):
        if not 0.0 <= v <= 1.0:
            raise WorldSpecError(f"obstacle {name} override must be in [0,1], got {v}")
    h = height if spec.height is None else float(spec.height)
    if h < 0:
        raise WorldSpecError(f"obstacle height must be >= 0, got {h}")
    vis = visible if spec.visible_to_depth is None else bool(spec.visible_to_depth)
    return Obstacle(spec.kind, fp, h, mu, nu, vis, material)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class World:
    width: float
    height: float
    cell_size: float
    truth_mu: np.ndarray  # (ny, nx)
    truth_nu: np.ndarray
    material: np.ndarray  # (ny, nx) int8 Material codes
    obstacles: tuple[Obstacle, ...]
    seed: int

    @property
    def extent(self) -> tuple[float, float]:
        return self.width, self.height

    @property
    def shape(self) -> tuple[int, int]:
        return self.truth_mu.shape

    def contains(self, px, py) -> np.ndarray:
        px, py = np.asarray(px, dtype=float), np.asarray(py, dtype=float)
        return (px >= 0) & (px <= self.width) & (py >= 0) & (py <= self.height)

    def cell_index(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        """Nearest cell (iy, ix), clamped to the grid."""
        ny, nx = self.shape
        ix = np.clip(np.floor(np.asarray(px, dtype=float) / self.cell_size).astype(int), 0, nx - 1)
        iy = np.clip(np.floor(np.asarray(py, dtype=float) / self.cell_size).astype(int), 0, ny - 1)
        return iy, ix

    def traction_at(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        iy, ix = self.cell_index(px, py)
        return self.truth_mu[iy, ix], self.truth_nu[iy, ix]

    def material_at(self, px, py) -> np.ndarray:
        iy, ix = self.cell_index(px, py)
        return self.material[iy, ix]

    def truth_map(self) -> TraversabilityMap:
        return TraversabilityMap((0.0, 0.0), self.cell_size, self.truth_mu, self.truth_nu)


def make_world(spec: WorldSpec, seed: int) -> World:
    if not (spec.width > 0 and spec.height > 0):
        raise WorldSpecError(f"world extent must be positive, got {spec.width}x{spec.height}")
    if not spec.cell_size > 0:
        raise WorldSpecError(f"cell_size must be > 0, got {spec.cell_size}")
    for name in ("base_mu", "base_nu"):
        if not 0.0 <= getattr(spec, name) <= 1.0:
            raise WorldSpecError(f"{name} must be in [0,1], got {getattr(spec, name)}")

    obstacles = [obstacle_from_spec(o) for o in spec.obstacles]
    for i, ob in enumerate(obstacles):
        x0, x1, y0, y1 = ob.footprint.bounds()
        if x0 < 0 or y0 < 0 or x1 > spec.width or y1 > spec.height:
            raise WorldSpecError(
                f"obstacles[{i}] ({ob.kind}) footprint [{x0:.3g},{x1:.3g}]x[{y0:.3g},{y1:.3g}] "
                f"lies outside the world extent {spec.width}x{spec.height}"
            )
    rng = np.random.default_rng(seed)
    obstacles.extend(_random_patches(spec, rng))

    nx = int(np.ceil(spec.width / spec.cell_size - 1e-9))
    ny = int(np.ceil(spec.height / spec.cell_size - 1e-9))
    xs = (np.arange(nx) + 0.5) * spec.cell_size
    ys = (np.arange(ny) + 0.5) * spec.cell_size
    X, Y = np.meshgrid(xs, ys)
    mu = np.full((ny, nx), float(spec.base_mu))
    nu = np.full((ny, nx), float(spec.base_nu))
    material = np.full((ny, nx), int(Material.GROUND), dtype=np.int8)
    for ob in sorted(obstacles, key=lambda o: o.solid):
        mask = ob.footprint.contains(X, Y)
        mu[mask] = ob.mu_override
        nu[mask] = ob.nu_override
        material[mask] = int(ob.material)
    logger.debug("world %dx%d cells, %d obstacles, seed=%d", nx, ny, len(obstacles), seed)
    return World(
        float(spec.width),
        float(spec.height),
        float(spec.cell_size),
        _frozen(mu),
        _frozen(nu),
        _frozen(material),
        tuple(obstacles),
        int(seed),
    )


def _random_patches(spec: WorldSpec, rng: np.random.Generator) -> list[Obstacle]:
    out = []
    lo, hi = spec.patch_size_range
    tlo, thi = spec.patch_traction_range
    for _ in range(int(spec.random_patches)):
        sx, sy = rng.uniform(lo, hi, size=2)
        sx, sy = min(sx, spec.width), min(sy, spec.height)
        cx = rng.uniform(sx / 2, spec.width - sx / 2)
        cy = rng.uniform(sy / 2, spec.height - sy / 2)
        t = float(rng.uniform(tlo, thi))
        out.append(
            Obstacle(
                "mud_patch",
                Footprint("box", float(cx), float(cy), hx=float(sx / 2), hy=float(sy / 2)),
                0.0,
                t,
                t,
                False,
                Material.MUD,
            )
        )
    return out


class TruthStep(NamedTuple):
    state: State2D
    clamped: bool


def step_truth(x: State2D, u: Control, world: World, dt: float) -> TruthStep:
    """Advance the true robot with traction read from the cell under it.

    Leaving the world extent clamps the position to the boundary and sets
    ``clamped``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    mu, nu = world.traction_at(x.px, x.py)
    nxt = step(x, u, float(mu), float(nu), dt)
    px = min(max(nxt.px, 0.0), world.width)
    py = min(max(nxt.py, 0.0), world.height)
    clamped = px != nxt.px or py != nxt.py
    if clamped:
        logger.warning("step left the world extent at (%.3f, %.3f); clamped", nxt.px, nxt.py)
        nxt = State2D(px, py, nxt.theta)
    return TruthStep(nxt, clamped)
