"""Built-in scenarios.

Each factory returns a validated :class:`ScenarioConfig`. They share a
coarse fusion grid (12 m x 12 m at 0.2 m) and a 16-bin depth layout so a
full collect → train → navigate cycle runs in minutes on a laptop core.
"""

from __future__ import annotations

from typing import Callable

from .config import (
    CollectSpec,
    FusionConfig,
    LossConfig,
    MissionSpec,
    MPCConfig,
    ObstacleSpec,
    ScenarioConfig,
    SensorNoise,
    WorldSpec,
)


def _fusion(**kw) -> FusionConfig:
    base = dict(grid_x=12.0, grid_y=12.0, cell_xy=0.2, d_max=8.0, depth_bins=16, frames=4, frame_stride=5)
    base.update(kw)
    return FusionConfig(**base)


def _base(name: str, world: WorldSpec, mission: MissionSpec, **kw) -> ScenarioConfig:
    cfg = ScenarioConfig(
        name=name,
        world=world,
        mission=mission,
        noise=SensorNoise(gnss_sigma=0.02, compass_offset=0.1, compass_sigma=0.01, depth_sigma=0.01),
        fusion=_fusion(),
        loss=LossConfig(epochs=30, learning_rate=0.05, batch_size=8),
        mpc=MPCConfig(N=25, num_samples=256),
        collect=CollectSpec(episodes=4, ticks_per_episode=250),
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


def empty() -> ScenarioConfig:
    """Obstacle-free world, one waypoint 5 m ahead."""
    return _base(
        "empty",
        WorldSpec(),
        MissionSpec(start=[2.0, 10.0, 0.0], waypoints=[[7.0, 10.0]]),
        max_ticks=200,
    )


def wall_gap() -> ScenarioConfig:
    """4 m wall blocking the direct line; its 1 m gap (y 10.4 to 11.4) forces a detour.

    The 4 s horizon lets the S-curves of the turn lattice reach the gap.
    """
    wall = [
        ObstacleSpec(kind="solid_block", x=10.0, y=9.2, size_x=0.4, size_y=2.4),
        ObstacleSpec(kind="solid_block", x=10.0, y=11.7, size_x=0.4, size_y=0.6),
    ]
    return _base(
        "wall_gap",
        WorldSpec(obstacles=wall),
        MissionSpec(start=[4.0, 10.0, 0.0], waypoints=[[16.0, 10.0]]),
        max_ticks=400,
        mpc=MPCConfig(N=40, num_samples=256),
    )


def tall_grass() -> ScenarioConfig:
    """A long band of tall grass: geometrically an obstacle, physically drivable."""
    grass = [ObstacleSpec(kind="tall_grass_patch", x=10.0, y=10.0, size_x=2.0, size_y=14.0)]
    return _base(
        "tall_grass",
        WorldSpec(obstacles=grass),
        MissionSpec(start=[4.0, 10.0, 0.0], waypoints=[[16.0, 10.0]]),
        max_ticks=600,
    )


def occlusion() -> ScenarioConfig:
    """Trees and hidden mud patches; hazards pass out of view as the robot drives."""
    obstacles = [
        ObstacleSpec(kind="solid_cylinder", x=6.0, y=7.0, radius=0.4),
        ObstacleSpec(kind="solid_cylinder", x=12.0, y=13.0, radius=0.4),
        ObstacleSpec(kind="solid_block", x=14.0, y=6.0, size_x=1.0, size_y=1.0),
        ObstacleSpec(kind="tall_grass_patch", x=8.0, y=14.0, size_x=2.0, size_y=2.0),
        ObstacleSpec(kind="mud_patch", x=10.0, y=9.0, size_x=2.0, size_y=2.0, mu=0.2, nu=0.2),
        ObstacleSpec(kind="ditch", x=15.0, y=12.0, size_x=1.0, size_y=3.0),
    ]
    return _base(
        "occlusion",
        WorldSpec(obstacles=obstacles, random_patches=3),
        MissionSpec(start=[3.0, 3.0, 0.785], waypoints=[[17.0, 17.0]]),
        collect=CollectSpec(episodes=6, ticks_per_episode=300),
    )


def square_loop() -> ScenarioConfig:
    """Closed square mission through three intermediate waypoints."""
    return _base(
        "square_loop",
        WorldSpec(obstacles=[ObstacleSpec(kind="solid_cylinder", x=10.0, y=10.0, radius=1.0)]),
        MissionSpec(
            start=[5.0, 5.0, 0.0],
            waypoints=[[15.0, 5.0], [15.0, 15.0], [5.0, 15.0], [5.0, 5.0]],
        ),
        max_ticks=1500,
    )


def quadruped_square() -> ScenarioConfig:
    """Square loop for a legged platform: angular channel scaled by 2.5."""
    cfg = square_loop()
    cfg.name = "quadruped_square"
    cfg.mpc.angular_scale = 2.5
    return cfg.validate()


SCENARIOS: dict[str, Callable[[], ScenarioConfig]] = {
    "empty": empty,
    "wall_gap": wall_gap,
    "tall_grass": tall_grass,
    "occlusion": occlusion,
    "square_loop": square_loop,
    "quadruped_square": quadruped_square,
}


def get_scenario(name: str) -> ScenarioConfig:
    try:
        return SCENARIOS[name]()
    except KeyError:
        from .config import ConfigError

        raise ConfigError(f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}") from None
