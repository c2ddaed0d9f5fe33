"""Synthetic world, truth stepping and sensors."""

import math

import numpy as np
import pytest


@pytest.fixture
def level_camera():
    from travnavsim.config import CameraSpec
    from travnavsim.geometry import camera_from_spec

    return camera_from_spec(CameraSpec(width=32, height=24, pitch_deg=0.0, mount_x=0.2, mount_height=0.3))


class TestMakeWorld:
    def test_empty_world_is_uniform(self):
        from travnavsim.config import WorldSpec
        from travnavsim.world.sim import Material, make_world

        w = make_world(WorldSpec(), seed=1)
        assert w.shape == (200, 200)
        assert np.all(w.truth_mu == 1.0) and np.all(w.truth_nu == 1.0)
        assert np.all(w.material == Material.GROUND)

    def test_solid_block_cells_are_zero(self, wall_world):
        from travnavsim.world.sim import Material

        mu, nu = wall_world.traction_at(7.4, 10.0)
        assert float(mu) == 0.0 and float(nu) == 0.0
        assert wall_world.material_at(7.4, 10.0) == Material.BLOCK
        assert float(wall_world.traction_at(5.0, 10.0)[0]) == 1.0

    def test_same_seed_is_bit_identical(self):
        from travnavsim.config import WorldSpec
        from travnavsim.world.sim import make_world

        spec = WorldSpec(random_patches=4)
        a, b = make_world(spec, 9), make_world(spec, 9)
        assert np.array_equal(a.truth_mu, b.truth_mu)
        assert np.array_equal(a.material, b.material)
        c = make_world(spec, 10)
        assert not np.array_equal(a.truth_mu, c.truth_mu)

    def test_solid_obstacle_wins_over_patch(self):
        from travnavsim.config import ObstacleSpec, WorldSpec
        from travnavsim.world.sim import Material, make_world

        spec = WorldSpec(
            obstacles=[
                ObstacleSpec(kind="solid_block", x=10.0, y=10.0, size_x=1.0, size_y=1.0),
                ObstacleSpec(kind="mud_patch", x=10.0, y=10.0, size_x=4.0, size_y=4.0),
            ]
        )
        w = make_world(spec, 0)
        assert float(w.traction_at(10.0, 10.0)[0]) == 0.0
        assert w.material_at(10.0, 10.0) == Material.BLOCK
        assert float(w.traction_at(11.5, 10.0)[0]) == pytest.approx(0.3)
        assert w.material_at(11.5, 10.0) == Material.MUD

    def test_obstacle_outside_extent_rejected(self):
        from travnavsim.config import ObstacleSpec, WorldSpec
        from travnavsim.world.sim import WorldSpecError, make_world

        with pytest.raises(WorldSpecError, match="outside the world extent"):
            make_world(WorldSpec(obstacles=[ObstacleSpec(kind="solid_block", x=19.9, y=5.0)]), 0)

    def test_unknown_kind_rejected(self):
        from travnavsim.config import ObstacleSpec, WorldSpec
        from travnavsim.world.sim import WorldSpecError, make_world

        with pytest.raises(WorldSpecError):
            make_world(WorldSpec(obstacles=[ObstacleSpec(kind="lava", x=5.0, y=5.0)]), 0)

    def test_non_positive_extent_rejected(self):
        from travnavsim.config import WorldSpec
        from travnavsim.world.sim import make_world

        with pytest.raises(ValueError):
            make_world(WorldSpec(width=0.0), 0)


class TestStepTruth:
    def test_forward_on_open_ground(self):
        from travnavsim.config import WorldSpec
        from travnavsim.dynamics.kinodynamics import Control, State2D
        from travnavsim.world.sim import make_world, step_truth

        w = make_world(WorldSpec(), 0)
        res = step_truth(State2D(1.0, 1.0, 0.0), Control(1.0, 0.0), w, 0.1)
        assert res.state.px == pytest.approx(1.1)
        assert not res.clamped

    def test_zero_traction_cell_holds_position(self, wall_world):
        from travnavsim.dynamics.kinodynamics import Control, State2D
        from travnavsim.world.sim import step_truth

        x = State2D(7.4, 10.0, 0.0)
        assert step_truth(x, Control(1.0, 1.0), wall_world, 0.1).state == x

    def test_leaving_extent_is_clamped(self):
        from travnavsim.config import WorldSpec
        from travnavsim.dynamics.kinodynamics import Control, State2D
        from travnavsim.world.sim import make_world, step_truth

        w = make_world(WorldSpec(), 0)
        res = step_truth(State2D(19.95, 5.0, 0.0), Control(1.0, 0.0), w, 0.1)
        assert res.clamped
        assert res.state.px == pytest.approx(20.0)


class TestSensePose:
    def test_zero_noise_is_exact(self):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import sense_pose

        z = sense_pose(State2D(1.0, 2.0, 0.5), SensorNoise(), np.random.default_rng(0))
        assert (z.px, z.py, z.heading) == pytest.approx((1.0, 2.0, 0.5))

    def test_compass_offset_added(self):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import sense_pose

        z = sense_pose(State2D(0.0, 0.0, 0.2), SensorNoise(compass_offset=0.3), np.random.default_rng(0))
        assert z.heading == pytest.approx(0.5)

    def test_gnss_sigma_matches_configuration(self):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import sense_pose

        rng = np.random.default_rng(4)
        noise = SensorNoise(gnss_sigma=0.05)
        ex = np.array([sense_pose(State2D(3.0, 3.0, 0.0), noise, rng).px - 3.0 for _ in range(10_000)])
        assert abs(ex.std() - 0.05) < 0.05 * 0.05


class TestRenderDepth:
    def test_wall_ahead_on_principal_axis(self, wall_world, level_camera):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import render_depth
        from travnavsim.world.sim import Material

        img = render_depth(wall_world, level_camera, State2D(5.0, 10.0, 0.0), None, SensorNoise(), np.random.default_rng(0))
        assert img.depth.shape == (24, 32)
        assert img.depth[12, 16] == pytest.approx(2.0)
        assert img.material[12, 16] == Material.BLOCK

    def test_off_axis_pixels_see_flat_face_at_constant_depth(self, wall_world, level_camera):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import render_depth

        # face at x = 7.2, camera at x = 5.2 and 0.3 m up; block 1 m tall, y in [8, 12]
        img = render_depth(wall_world, level_camera, State2D(5.0, 10.0, 0.0), None, SensorNoise(), np.random.default_rng(0))
        assert img.valid[7:15, 1:].all()
        assert not img.valid[:7].any() and not img.valid[15:].any()
        assert np.max(np.abs(img.depth[img.valid] - 2.0)) < 1e-6

    def test_cylinder_depth_matches_closed_form(self, level_camera):
        from travnavsim.config import ObstacleSpec, SensorNoise, WorldSpec
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import render_depth
        from travnavsim.world.sim import make_world

        w = make_world(WorldSpec(obstacles=[ObstacleSpec(kind="solid_cylinder", x=8.0, y=10.0, radius=0.5)]), 0)
        img = render_depth(w, level_camera, State2D(5.0, 10.0, 0.0), None, SensorNoise(), np.random.default_rng(0))
        # ray (1, a) from 2.8 m in front of the axis: (t - 2.8)^2 + (a t)^2 = 0.25
        a = (np.arange(32) - level_camera.cx) / level_camera.fx
        A, B, C = 1.0 + a * a, -5.6, 2.8**2 - 0.25
        disc = B * B - 4.0 * A * C
        expected = np.where(disc >= 0, (-B - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * A), 0.0)
        assert int(np.sum(expected > 0)) >= 3
        for row in (8, 12):
            assert np.max(np.abs(img.depth[row] - expected)) < 1e-6

    def test_same_seed_same_noisy_frame(self, wall_world, level_camera):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import render_depth

        noise = SensorNoise(depth_sigma=0.05, depth_dropout_rate=0.1)
        pose = State2D(5.0, 10.0, 0.1)
        a = render_depth(wall_world, level_camera, pose, None, noise, np.random.default_rng(3))
        b = render_depth(wall_world, level_camera, pose, None, noise, np.random.default_rng(3))
        c = render_depth(wall_world, level_camera, pose, None, noise, np.random.default_rng(4))
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.material, b.material)
        assert not np.array_equal(a.depth, c.depth)

    def test_empty_world_has_no_depth_returns(self, level_camera):
        from travnavsim.config import SensorNoise, WorldSpec
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import render_depth
        from travnavsim.world.sim import make_world

        w = make_world(WorldSpec(), 0)
        img = render_depth(w, level_camera, State2D(5.0, 10.0, 0.0), None, SensorNoise(), np.random.default_rng(0))
        assert not img.valid.any()

    def test_camera_turned_away_misses_wall(self, wall_world):
        from travnavsim.config import CameraSpec, SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.geometry import camera_from_spec
        from travnavsim.world.sensors import render_depth

        cam = camera_from_spec(CameraSpec(pitch_deg=0.0, yaw_deg=90.0))
        img = render_depth(wall_world, cam, State2D(5.0, 10.0, 0.0), None, SensorNoise(), np.random.default_rng(0))
        assert img.depth[12, 16] == 0.0

    def test_mud_visible_only_as_appearance(self):
        from travnavsim.config import CameraSpec, ObstacleSpec, SensorNoise, WorldSpec
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.geometry import camera_from_spec
        from travnavsim.world.sensors import render_depth
        from travnavsim.world.sim import Material, make_world

        w = make_world(WorldSpec(obstacles=[ObstacleSpec(kind="mud_patch", x=7.0, y=10.0, size_x=2.0, size_y=4.0)]), 0)
        cam = camera_from_spec(CameraSpec(pitch_deg=15.0))
        img = render_depth(w, cam, State2D(5.0, 10.0, 0.0), None, SensorNoise(), np.random.default_rng(0))
        assert not img.valid.any()
        assert img.material[12, 16] == Material.MUD
        assert img.surface_depth[12, 16] == pytest.approx(0.3 / math.sin(math.radians(15.0)))

    def test_depth_pgm_round_trip_in_millimetres(self, wall_world, level_camera, tmp_path):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.io.artifacts import read_pgm
        from travnavsim.world.sensors import render_depth

        img = render_depth(wall_world, level_camera, State2D(5.0, 10.0, 0.2), None, SensorNoise(depth_sigma=0.01), np.random.default_rng(1))
        mm = read_pgm(img.to_pgm(tmp_path / "depth.pgm"))
        assert mm.shape == img.depth.shape
        assert np.max(np.abs(mm / 1000.0 - img.depth)) <= 0.0005 + 1e-12
        assert np.array_equal(mm == 0, ~img.valid)

    def test_dropout_invalidates_all_pixels(self, wall_world, level_camera):
        from travnavsim.config import SensorNoise
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.world.sensors import render_depth

        noise = SensorNoise(depth_dropout_rate=1.0)
        img = render_depth(wall_world, level_camera, State2D(5.0, 10.0, 0.0), None, noise, np.random.default_rng(0))
        assert not img.valid.any()
