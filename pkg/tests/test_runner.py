"""Scenario runner, artifacts, CLI and benchmark outputs."""

import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

SRC = str(Path(__file__).resolve().parents[1] / "src")


def _cli(*args, timeout=300):
    env = dict(os.environ, PYTHONPATH=SRC + os.pathsep + os.environ.get("PYTHONPATH", ""))
    return subprocess.run(
        [sys.executable, "-m", "travnavsim.cli", *args],
        capture_output=True,
        text=True,
        timeout=timeout,
        env=env,
    )


def _small(name="empty", **kw):
    """Built-in scenario with a small camera and sampler so runs take seconds."""
    from travnavsim.config import CameraSpec, SensorNoise
    from travnavsim.scenarios import get_scenario

    cfg = get_scenario(name)
    cfg.camera = CameraSpec(width=16, height=12)
    cfg.noise = SensorNoise()
    cfg.mpc.num_samples = 64
    cfg.mpc.N = 15
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


class TestHelpers:
    def test_select_history_spacing(self):
        from travnavsim.runner import select_history

        assert select_history(list(range(10)), 3, 2) == [5, 7, 9]
        assert select_history(list(range(10)), 1, 5) == [9]

    def test_select_history_warmup(self):
        from travnavsim.runner import select_history

        assert select_history([0, 1], 3, 2) == [1]
        assert select_history([], 3, 2) == []

    def test_compose_extrinsics(self):
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.runner import compose_extrinsics

        mount = np.eye(4)
        mount[:3, 3] = [0.2, 0.0, 0.3]
        ref = State2D(3.0, 4.0, 0.5)
        ahead = State2D(3.0 + np.cos(0.5), 4.0 + np.sin(0.5), 0.5)
        ext = compose_extrinsics([ref, ahead], [mount, mount], ref)
        assert np.allclose(ext[0], mount)
        assert ext[1][:3, 3] == pytest.approx([1.2, 0.0, 0.3])

    def test_truth_map_zero_outside_world(self, wall_world):
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.fusion.bev import GridSpec
        from travnavsim.runner import local_truth_map

        spec = GridSpec((-6.0, -6.0, -0.4), 0.2, 0.4, 60, 60, 4)
        tmap = local_truth_map(wall_world, State2D(0.5, 10.0, 0.0), spec)
        mu, _ = tmap.sample(np.array([-2.0, 1.0]), np.array([0.0, 0.0]))
        assert mu == pytest.approx([0.0, 1.0])
        wall_mu, _ = tmap.sample(6.9, 0.0)
        assert float(wall_mu) == 0.0

    def test_geometric_map_marks_wall(self, wall_world):
        from travnavsim.config import CameraSpec, SensorNoise, WorldSpec
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.fusion.bev import GridSpec
        from travnavsim.geometry import camera_from_spec
        from travnavsim.runner import geometric_map
        from travnavsim.world.sensors import render_depth
        from travnavsim.world.sim import make_world

        cam = camera_from_spec(CameraSpec(width=32, height=24, pitch_deg=0.0))
        spec = GridSpec((-6.0, -6.0, -0.4), 0.2, 0.4, 60, 60, 4)
        pose = State2D(5.0, 10.0, 0.0)
        img = render_depth(wall_world, cam, pose, None, SensorNoise(), np.random.default_rng(0))
        tmap = geometric_map([img.depth], [cam.extrinsic], cam, spec)
        assert tmap.mu.min() == 0.0
        assert float(tmap.sample(0.0, 0.0)[0]) == 1.0
        xs, ys = spec.xy_centers()
        rows, cols = np.nonzero(tmap.mu == 0.0)
        assert np.all((xs[cols] > 1.9) & (xs[cols] < 2.5))
        assert np.all(np.abs(ys[rows]) < 2.2)

        empty = render_depth(make_world(WorldSpec(), 0), cam, pose, None, SensorNoise(), np.random.default_rng(0))
        assert np.all(geometric_map([empty.depth], [cam.extrinsic], cam, spec).mu == 1.0)

    def test_teleop_heads_for_goal(self):
        from travnavsim.dynamics.kinodynamics import State2D
        from travnavsim.runner import teleop_control

        cfg = _small()
        cfg.collect.exploration_sigma = [0.0, 0.0]
        u = teleop_control(State2D(0.0, 0.0, 0.0), (5.0, 0.0), cfg, np.random.default_rng(0))
        assert (u.v, u.omega) == pytest.approx((cfg.mpc.v_cruise, 0.0))
        left = teleop_control(State2D(0.0, 0.0, 0.0), (0.0, 5.0), cfg, np.random.default_rng(0))
        assert left.omega > 0.0


class TestArtifacts:
    def test_pgm_round_trip(self, tmp_path):
        from travnavsim.io.artifacts import read_pgm, write_pgm

        img = np.arange(12, dtype=np.uint16).reshape(3, 4) * 20
        assert np.array_equal(read_pgm(write_pgm(tmp_path / "a.pgm", img)), img)
        deep = img * 100
        assert np.array_equal(read_pgm(write_pgm(tmp_path / "b.pgm", deep, maxval=65535)), deep)

    def test_pgm_rejects_colour(self, tmp_path):
        from travnavsim.io.artifacts import write_pgm

        with pytest.raises(ValueError):
            write_pgm(tmp_path / "c.pgm", np.zeros((2, 2, 3)))

    def test_map_round_trip_quantised(self, tmp_path):
        from travnavsim.io.artifacts import read_map, write_map
        from travnavsim.maps import TraversabilityMap

        rng = np.random.default_rng(0)
        m = TraversabilityMap((-1.0, 2.0), 0.25, rng.uniform(size=(5, 7)), rng.uniform(size=(5, 7)))
        side = write_map(m, tmp_path / "m")
        assert side["nx"] == 7 and side["ny"] == 5
        back = read_map(tmp_path / "m.json")
        assert back.origin == (-1.0, 2.0)
        assert np.max(np.abs(back.mu - m.mu)) <= 0.5 / 255 + 1e-12


class TestScenarioRunner:
    def test_worldgen_outputs(self, tmp_path):
        from travnavsim.runner import ScenarioRunner

        rep = ScenarioRunner(_small("wall_gap"), tmp_path, progress=False).worldgen()
        assert rep["obstacles"] == 2
        for name in ("truth.json", "truth_mu.pgm", "truth_nu.pgm", "obstacles.csv", "world.png"):
            assert (tmp_path / "world" / name).exists(), name
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["commands"] == ["worldgen"]
        entry = next(a for a in manifest["artifacts"] if a["path"] == "config_used.yaml")
        from travnavsim.io.artifacts import sha256_file

        assert entry["sha256"] == sha256_file(tmp_path / "config_used.yaml")

    def test_navigate_with_truth_map_reaches_goal(self, tmp_path):
        from travnavsim.runner import ScenarioRunner

        report = ScenarioRunner(_small(map_source="truth"), tmp_path, progress=False).navigate()
        assert report.success and report.reason == "mission_complete"
        assert report.waypoints_reached == report.waypoints_total == 1
        assert report.final_goal_distance < 0.5 + 0.1
        assert report.min_traversability_crossed == 1.0
        assert (tmp_path / "trajectory.csv").exists()
        assert (tmp_path / "run_report.json").exists()
        assert (tmp_path / "overview.png").exists()

    def test_tick_budget_exhausted(self, tmp_path):
        from travnavsim.runner import ScenarioRunner

        report = ScenarioRunner(_small(map_source="truth", max_ticks=1), tmp_path, progress=False).navigate()
        assert not report.success
        assert report.reason == "max_ticks" and report.ticks_used == 1

    def test_model_source_requires_model(self, tmp_path):
        from travnavsim.runner import ScenarioRunner

        with pytest.raises(ValueError, match="needs a trained model"):
            ScenarioRunner(_small(), tmp_path, progress=False).navigate(map_source="model")

    def test_save_maps(self, tmp_path):
        from travnavsim.runner import ScenarioRunner

        ScenarioRunner(_small(map_source="geometric", max_ticks=2, save_maps=True), tmp_path, progress=False).navigate()
        assert (tmp_path / "maps" / "tick_00000.json").exists()
        assert (tmp_path / "maps" / "tick_00001_mu.pgm").exists()


def _collect_cfg(name="empty", **kw):
    cfg = _small(name, **kw)
    cfg.collect.episodes = 1
    cfg.collect.ticks_per_episode = 60
    cfg.fusion.frames = 2
    cfg.fusion.frame_stride = 2
    cfg.loss.M = 3
    return cfg


class TestCollect:
    def test_same_seed_same_dataset(self, tmp_path):
        from travnavsim.runner import ScenarioRunner

        for d in ("a", "b"):
            ScenarioRunner(_collect_cfg(), tmp_path / d, progress=False).collect()
        ds = [json.loads((tmp_path / d / "dataset" / "manifest.json").read_text()) for d in ("a", "b")]
        assert ds[0] == ds[1]
        arts = [
            [(x["path"], x["sha256"]) for x in json.loads((tmp_path / d / "manifest.json").read_text())["artifacts"]]
            for d in ("a", "b")
        ]
        assert arts[0] == arts[1]

    def test_tuple_count_matches_log_length(self, tmp_path):
        import pandas as pd

        from travnavsim.runner import ScenarioRunner
        from travnavsim.training.dataset import expected_tuple_count

        out = ScenarioRunner(_collect_cfg(), tmp_path, progress=False).collect()
        diag = pd.read_csv(tmp_path / "dataset_diagnostics.csv").iloc[0]
        L = int(diag["log_length"])
        manifest = json.loads((tmp_path / "dataset" / "manifest.json").read_text())
        assert manifest["ticks"] == L
        # span = (frames - 1) * stride + 1 = 3, M = 3
        assert int(diag["candidates"]) == L - 3 - 2 * 3 + 2 == expected_tuple_count(L, 2, 3, 2)
        assert out["tuples"] == manifest["count"] == int(diag["candidates"]) - int(diag["skipped_unconverged"])

    def test_frame_dumps_round_trip(self, tmp_path):
        import pandas as pd

        from travnavsim.fusion.bev import depth_to_occupancy
        from travnavsim.io.artifacts import read_pgm
        from travnavsim.runner import ScenarioRunner

        cfg = _collect_cfg("wall_gap", dump_depth=True, dump_voxels=True)
        runner = ScenarioRunner(cfg, tmp_path, progress=False)
        runner.collect()
        frames = runner.simulate_episode(0)["frames"]
        d = tmp_path / "frames" / "ep00"
        assert len(list(d.glob("depth_*.pgm"))) == len(frames)
        assert len(list(d.glob("voxels_*.csv"))) == len(frames)
        for f in frames[::10]:
            mm = read_pgm(d / f"depth_{f.tick:05d}.pgm")
            assert np.array_equal(mm, np.round(f.depth * 1000.0))
            table = pd.read_csv(d / f"voxels_{f.tick:05d}.csv")
            assert list(table.columns) == ["iz", "iy", "ix", "c0"]
            occ = depth_to_occupancy(f.depth, runner.camera, f.extrinsic, runner.grid).occupied()
            assert len(table) == int(occ.sum())
        artifacts = json.loads((tmp_path / "manifest.json").read_text())["artifacts"]
        assert not any(a["path"].startswith("frames") for a in artifacts)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """collect → train on a short single-episode run."""
    from travnavsim.runner import ScenarioRunner

    out = tmp_path_factory.mktemp("pipeline")
    cfg = _small(max_ticks=3)
    cfg.collect.episodes = 1
    cfg.collect.ticks_per_episode = 60
    cfg.fusion.frames = 2
    cfg.fusion.frame_stride = 2
    cfg.loss.M = 3
    cfg.loss.epochs = 2
    runner = ScenarioRunner(cfg, out, progress=False)
    collected = runner.collect()
    trained = runner.train(out / "dataset")
    return runner, out, collected, trained


class TestPipeline:
    def test_collect_writes_dataset_and_labels(self, pipeline):
        import pandas as pd

        _, out, collected, _ = pipeline
        assert collected["tuples"] > 0
        manifest = json.loads((out / "dataset" / "manifest.json").read_text())
        assert manifest["count"] == collected["tuples"]
        assert manifest["history_span"] == 3
        labels = pd.read_csv(out / "labels.csv")
        assert {"mu", "nu", "excitation_flag", "truth_mu"} <= set(labels.columns)
        assert labels["mu"].between(0, 1).all()

    def test_train_writes_checkpoint_and_curve(self, pipeline):
        _, out, _, trained = pipeline
        assert Path(trained["model"]).exists()
        assert trained["epochs"] == 2
        assert (out / "loss_curve_temporal.csv").exists()

    def test_navigate_with_model(self, pipeline):
        runner, _, _, trained = pipeline
        report = runner.navigate(trained["model"])
        assert report.map_source == "model"
        assert report.ticks_used <= 3

    def test_evaluate_summary(self, pipeline):
        runner, out, _, trained = pipeline
        summary = runner.evaluate(out / "dataset", [trained["model"]])
        assert list(summary["model"]) == ["model_temporal"]
        assert 0.0 <= float(summary["mean_abs_error"].iloc[0]) <= 1.0
        assert (out / "metrics.csv").exists()

    def test_manifest_accumulates_commands(self, pipeline):
        _, out, _, _ = pipeline
        commands = json.loads((out / "manifest.json").read_text())["commands"]
        assert commands[:2] == ["collect", "train"]


class TestCLI:
    def test_help_exits_zero(self):
        assert _cli("--help").returncode == 0

    def test_version_output(self):
        from travnavsim import __version__

        assert __version__ in _cli("--version").stdout

    def test_no_command_is_usage_error(self):
        assert _cli().returncode == 2

    def test_self_check_passes(self):
        r = _cli("selfcheck")
        assert r.returncode == 0, r.stderr
        assert json.loads(r.stdout)["status"] == "PASS"

    def test_invalid_config_exit_code(self, tmp_path):
        import yaml

        p = tmp_path / "bad.yaml"
        p.write_text(yaml.dump({"mpc": {"clearance_k": 4}}))
        r = _cli("worldgen", "--config", str(p), "--out", str(tmp_path / "o"), "--quiet")
        assert r.returncode == 2
        rep = json.loads(r.stdout)
        assert rep["status"] == "invalid" and "clearance_k" in rep["detail"]

    def test_unknown_scenario_exit_code(self, tmp_path):
        assert _cli("worldgen", "--scenario", "moon", "--out", str(tmp_path), "--quiet").returncode == 2

    def test_worldgen_in_process(self, tmp_path, capsys):
        from travnavsim.cli import main

        rc = main(["worldgen", "--scenario", "wall_gap", "--seed", "5", "--out", str(tmp_path), "--quiet"])
        assert rc == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["status"] == "ok" and rep["obstacles"] == 2
        assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 5


class TestBenchmark:
    def test_plot_outputs(self, tmp_path):
        from travnavsim.benchmark import run_benchmark_with_plots

        js = run_benchmark_with_plots(tmp_path, suite="timing", mhe_windows=3)
        assert js["tool"] == "trav-nav-sim" and js["suite"] == "timing"
        checks = {r["check"] for r in js["results"]}
        assert {"mhe_noise_free_max_param_error", "mpc_ms_per_tick"} <= checks
        for name in ("benchmark.json", "benchmark.csv", "benchmark_runtime.png"):
            assert (tmp_path / name).exists(), name

    def test_unknown_suite(self):
        from travnavsim.benchmark import run_benchmark

        with pytest.raises(ValueError, match="suite"):
            run_benchmark(suite="everything")
