"""Scenario configuration: YAML loading, unknown keys, validation, built-ins."""

import pytest
import yaml


class TestScenarioConfig:
    def test_defaults_validate(self):
        from travnavsim.config import ScenarioConfig

        cfg = ScenarioConfig().validate()
        assert cfg.tick_dt == pytest.approx(0.1)

    def test_yaml_round_trip(self, tmp_path):
        from travnavsim.config import ObstacleSpec, ScenarioConfig, WorldSpec

        cfg = ScenarioConfig(name="rt", world=WorldSpec(obstacles=[ObstacleSpec(kind="ditch", x=5.0, y=5.0)]))
        cfg.mpc.selection = "best_of_n"
        p = tmp_path / "c.yaml"
        cfg.to_yaml(p)
        cfg2 = ScenarioConfig.from_yaml(p)
        assert cfg2.to_dict() == cfg.to_dict()
        assert isinstance(cfg2.world.obstacles[0], ObstacleSpec)
        assert cfg2._config_validation["status"] == "PASS"

    def test_unknown_keys_warn_and_are_ignored(self, caplog):
        from travnavsim.config import ScenarioConfig

        cfg = ScenarioConfig.from_dict({"seed": 3, "mpc": {"N": 12, "horizon_s": 2.0}, "colour": "red"})
        assert cfg.seed == 3 and cfg.mpc.N == 12
        rep = cfg._config_validation
        assert rep["status"] == "WARN"
        assert rep["unknown_keys"] == ["colour", "mpc.horizon_s"]
        assert "Unknown config keys" in caplog.text

    def test_unknown_obstacle_key_has_indexed_path(self):
        from travnavsim.config import ScenarioConfig

        cfg = ScenarioConfig.from_dict({"world": {"obstacles": [{"kind": "ditch", "x": 3.0, "y": 3.0, "depth": 1}]}})
        assert cfg._config_validation["unknown_keys"] == ["world.obstacles[0].depth"]

    def test_strict_mode_from_yaml_key(self):
        from travnavsim.config import ConfigError, ScenarioConfig

        with pytest.raises(ConfigError, match="Unknown config keys"):
            ScenarioConfig.from_dict({"config_strict": True, "bogus": 1})

    def test_strict_mode_from_environment(self, monkeypatch):
        from travnavsim.config import ConfigError, ScenarioConfig

        monkeypatch.setenv("TRAVNAV_CONFIG_STRICT", "1")
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict({"schema_version": "9.9"})

    def test_unsupported_schema_warns_when_lenient(self):
        from travnavsim.config import ScenarioConfig

        cfg = ScenarioConfig.from_dict({"schema_version": "9.9"})
        assert cfg._config_validation["status"] == "WARN"

    def test_missing_file(self, tmp_path):
        from travnavsim.config import ConfigError, ScenarioConfig

        with pytest.raises(ConfigError, match="not found"):
            ScenarioConfig.from_yaml(tmp_path / "nope.yaml")

    def test_non_mapping_document(self, tmp_path):
        from travnavsim.config import ConfigError, ScenarioConfig

        p = tmp_path / "list.yaml"
        p.write_text(yaml.dump([1, 2, 3]))
        with pytest.raises(ConfigError, match="mapping"):
            ScenarioConfig.from_yaml(p)


class TestValidation:
    @pytest.mark.parametrize(
        "patch, match",
        [
            ({"mpc": {"clearance_k": 4}}, "clearance_k"),
            ({"mpc": {"selection": "random"}}, "selection"),
            ({"mpc": {"Q": [1.0, -1.0, 0.0]}}, "mpc.Q"),
            ({"mpc": {"R": [1.0, 1.0, 1.0]}}, "mpc.R"),
            ({"mpc": {"arc_rates": 1}}, "arc_rates"),
            ({"mpc": {"stuck_traction": 1.0}}, "stuck_traction"),
            ({"estimator": {"N": 1}}, "estimator.N"),
            ({"estimator": {"solver": "newton"}}, "solver"),
            ({"estimator": {"dt": 0.05}}, "1/tick_rate"),
            ({"fusion": {"d_min": 5.0, "d_max": 2.0}}, "d_min"),
            ({"fusion": {"variant": "lidar"}}, "variant"),
            ({"loss": {"momentum": 1.0}}, "momentum"),
            ({"noise": {"compass_offset": 4.0}}, "compass_offset"),
            ({"mission": {"waypoints": []}}, "waypoints"),
            ({"mission": {"start": [30.0, 5.0, 0.0]}}, "outside"),
            ({"map_source": "oracle"}, "map_source"),
            ({"n_jobs": 0}, "n_jobs"),
        ],
    )
    def test_invalid_field_named(self, patch, match):
        from travnavsim.config import ConfigError, ScenarioConfig

        with pytest.raises(ConfigError, match=match):
            ScenarioConfig.from_dict(patch).validate()

    def test_world_errors_are_world_spec_errors(self):
        from travnavsim.config import ScenarioConfig
        from travnavsim.world.sim import WorldSpecError

        with pytest.raises(WorldSpecError):
            ScenarioConfig.from_dict({"world": {"base_mu": 1.5}}).validate()

    def test_weight_matrix_forms(self):
        import numpy as np

        from travnavsim.config import ConfigError, as_weight_matrix

        assert np.array_equal(as_weight_matrix([1, 2], 2, "w"), np.diag([1.0, 2.0]))
        assert np.array_equal(as_weight_matrix(3.0, 2, "w"), 3.0 * np.eye(2))
        assert as_weight_matrix([[1, 0.5], [0.5, 1]], 2, "w")[0, 1] == 0.5
        with pytest.raises(ConfigError):
            as_weight_matrix([[1, 0], [0, 1]], 3, "w")


class TestBuiltInScenarios:
    @pytest.mark.parametrize("name", ["empty", "wall_gap", "tall_grass", "occlusion", "square_loop", "quadruped_square"])
    def test_factories_validate(self, name):
        from travnavsim.scenarios import get_scenario
        from travnavsim.world.sim import make_world

        cfg = get_scenario(name)
        assert cfg.name == name
        make_world(cfg.world, cfg.seed)

    def test_wall_gap_blocks_the_direct_line(self):
        from travnavsim.scenarios import get_scenario
        from travnavsim.world.sim import make_world

        cfg = get_scenario("wall_gap")
        world = make_world(cfg.world, cfg.seed)
        y_line = cfg.mission.start[1]
        assert cfg.mission.waypoints[0][1] == y_line
        assert float(world.traction_at(10.0, y_line)[0]) == 0.0
        assert float(world.traction_at(10.0, 10.9)[0]) == 1.0

    def test_quadruped_scales_angular_channel(self):
        from travnavsim.scenarios import get_scenario

        assert get_scenario("quadruped_square").mpc.angular_scale == 2.5
        assert get_scenario("square_loop").mpc.angular_scale == 1.0

    def test_unknown_scenario(self):
        from travnavsim.config import ConfigError
        from travnavsim.scenarios import get_scenario

        with pytest.raises(ConfigError, match="available"):
            get_scenario("moon")

    def test_example_files_load(self):
        from pathlib import Path

        from travnavsim.config import ScenarioConfig

        for p in sorted((Path(__file__).resolve().parents[1] / "scenarios").glob("*.yaml")):
            cfg = ScenarioConfig.from_yaml(p).validate()
            assert cfg._config_validation["unknown_keys"] == [], p.name
