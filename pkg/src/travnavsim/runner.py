"""Scenario orchestration: worldgen → collect → train → navigate → eval.

Navigation tick order: sense → estimate → fuse/predict → control → actuate.
All randomness comes from generators seeded by (seed, stream) so every
command is reproducible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence
import json
import logging
import math

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed
from tqdm import tqdm

from . import __version__
from .config import ScenarioConfig
from .control.mpc import MPCController, Reference, advance_waypoint
from .dynamics.kinodynamics import Control, State2D
from .estimation.mhe import LabelRecord, MovingHorizonEstimator, run_labeling
from .fusion.bev import GridSpec, TraversabilityNet, build_model, depth_to_occupancy, encode_observation
from .geometry import camera_from_spec, invert_transform, pose_to_transform, relative_pose, wrap_angle
from .io.artifacts import save_json, save_table, sha256_file, write_map
from .maps import TraversabilityMap
from .training.dataset import SensorFrame, build_dataset, history_span, load_dataset, save_dataset
from .training.trainer import evaluate, load_model, save_model, train
from .world.sensors import DepthImage, render_depth, sense_pose
from .world.sim import NUM_MATERIALS, World, make_world, step_truth

logger = logging.getLogger(__name__)

TOOL = "trav-nav-sim"

# generator streams
_WORLD, _COLLECT, _SENSE, _MPC = 0, 1, 2, 3

# per-tick dumps stay out of the manifest
_PER_TICK_DIRS = {"maps", "samples", "frames"}


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


@dataclass
class RunReport:
    success: bool
    reason: str
    ticks_used: int
    path_length: float
    min_traversability_crossed: float
    final_goal_distance: float
    waypoints_reached: int
    waypoints_total: int
    map_source: str
    log_path: str

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# map sources
# ---------------------------------------------------------------------------


def local_truth_map(world: World, pose: State2D, spec: GridSpec) -> TraversabilityMap:
    """World truth resampled onto the robot-centred grid; outside the world is 0."""
    xs, ys = spec.xy_centers()
    X, Y = np.meshgrid(xs, ys)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = pose.px + c * X - s * Y
    wy = pose.py + s * X + c * Y
    mu, nu = world.traction_at(wx, wy)
    inside = world.contains(wx, wy)
    return TraversabilityMap(
        (spec.origin[0], spec.origin[1]), spec.cell_xy, np.where(inside, mu, 0.0), np.where(inside, nu, 0.0)
    )


def geometric_map(depths: Sequence[np.ndarray], extrinsics: Sequence[np.ndarray], camera, spec: GridSpec) -> TraversabilityMap:
    """Occupancy-as-obstacle baseline: any depth return in a column makes it untraversable."""
    occ = np.zeros((spec.ny, spec.nx), dtype=bool)
    for d, ext in zip(depths, extrinsics):
        occ |= depth_to_occupancy(d, camera, ext, spec).occupied().any(axis=0)
    free = np.where(occ, 0.0, 1.0)
    return TraversabilityMap((spec.origin[0], spec.origin[1]), spec.cell_xy, free, free.copy())


def compose_extrinsics(poses: Sequence[State2D], mounts: Sequence[np.ndarray], reference: State2D) -> np.ndarray:
    """Per-frame camera → robot-at-reference transforms."""
    T_ref_inv = invert_transform(pose_to_transform(reference.px, reference.py, reference.theta))
    return np.stack(
        [T_ref_inv @ pose_to_transform(p.px, p.py, p.theta) @ m for p, m in zip(poses, mounts)]
    )


def select_history(buffer: Sequence, frames: int, stride: int) -> list:
    """Last ``frames`` entries spaced ``stride`` apart, oldest first (fewer while warming up)."""
    n = len(buffer)
    idx = [n - 1 - j * stride for j in range(frames) if n - 1 - j * stride >= 0]
    return [buffer[i] for i in reversed(idx)]


def teleop_control(pose: State2D, goal, cfg: ScenarioConfig, rng: np.random.Generator) -> Control:
    """Scripted driver: steer towards the goal with exploration noise."""
    c, m = cfg.collect, cfg.mpc
    e = float(wrap_angle(math.atan2(goal[1] - pose.py, goal[0] - pose.px) - pose.theta))
    noise = rng.normal(0.0, 1.0, size=2) * np.asarray(c.exploration_sigma, dtype=float)
    v = float(np.clip(m.v_cruise * max(0.0, math.cos(e)) + noise[0], m.v_min, m.v_max))
    w = float(np.clip(c.steering_gain * e + noise[1], -m.omega_max, m.omega_max))
    return Control(v, w)


class ScenarioRunner:
    def __init__(self, cfg: ScenarioConfig, out: str | Path | None = None, progress: bool = True):
        self.cfg = cfg
        self.out = Path(out or cfg.output_dir)
        self.progress = progress
        self.camera = camera_from_spec(cfg.camera)
        self._world: World | None = None

    @property
    def world(self) -> World:
        if self._world is None:
            self._world = make_world(self.cfg.world, self.cfg.seed)
        return self._world

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_config(self.cfg.fusion)

    def _prepare(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg.to_yaml(self.out / "config_used.yaml")
        rep = getattr(self.cfg, "_config_validation", None)
        if isinstance(rep, dict):
            save_json(rep, self.out / "config_validation.json")

    def _sensor_frame(self, tick: int, pose: State2D, rng: np.random.Generator) -> SensorFrame:
        img = render_depth(self.world, self.camera, pose, None, self.cfg.noise, rng, self.cfg.camera.max_range)
        return SensorFrame(tick, img.material, img.surface_depth, img.depth, self.camera.extrinsic, self.camera.intrinsics)

    def _dump_frame(self, episode: int, frame: SensorFrame) -> None:
        if not (self.cfg.dump_depth or self.cfg.dump_voxels):
            return
        d = self.out / "frames" / f"ep{episode:02d}"
        d.mkdir(parents=True, exist_ok=True)
        if self.cfg.dump_depth:
            DepthImage(frame.depth, frame.material, frame.surface_depth).to_pgm(d / f"depth_{frame.tick:05d}.pgm")
        if self.cfg.dump_voxels:
            occ = depth_to_occupancy(frame.depth, self.camera, frame.extrinsic, self.grid)
            occ.to_frame().to_csv(d / f"voxels_{frame.tick:05d}.csv", index=False)

    # ------------------------------------------------------------------
    # worldgen
    # ------------------------------------------------------------------

    def worldgen(self) -> dict:
        self._prepare()
        logger.info("=== World generation (seed=%d) ===", self.cfg.seed)
        w = self.world
        d = self.out / "world"
        write_map(w.truth_map(), d / "truth")
        rows = []
        for ob in w.obstacles:
            x0, x1, y0, y1 = ob.footprint.bounds()
            rows.append(
                {
                    "kind": ob.kind,
                    "material": ob.material.name.lower(),
                    "cx": ob.footprint.cx,
                    "cy": ob.footprint.cy,
                    "x_min": x0,
                    "x_max": x1,
                    "y_min": y0,
                    "y_max": y1,
                    "height": ob.height,
                    "mu": ob.mu_override,
                    "nu": ob.nu_override,
                    "visible_to_depth": ob.visible_to_depth,
                }
            )
        save_table(pd.DataFrame(rows), d / "obstacles.csv")
        plot_overview(w, None, self.cfg.mission.waypoints, None, d / "world.png")
        summary = {
            "status": "ok",
            "world": str(d),
            "cells": list(w.shape),
            "obstacles": len(w.obstacles),
            "mean_truth_mu": float(w.truth_mu.mean()),
        }
        self.write_manifest("worldgen")
        return summary

    # ------------------------------------------------------------------
    # collect
    # ------------------------------------------------------------------

    def _random_point(self, rng: np.random.Generator, margin: float = 1.0) -> tuple[float, float]:
        w = self.world
        return float(rng.uniform(margin, w.width - margin)), float(rng.uniform(margin, w.height - margin))

    def _sample_goal(self, rng: np.random.Generator) -> tuple[float, float]:
        patches = [o for o in self.world.obstacles if not o.solid and o.mu_override < 1.0]
        u = rng.random()
        if patches and u < self.cfg.collect.patch_goal_probability:
            ob = patches[int(rng.integers(len(patches)))]
            x0, x1, y0, y1 = ob.footprint.bounds()
            return float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))
        return self._random_point(rng)

    def _start_pose(self, rng: np.random.Generator) -> State2D:
        for _ in range(100):
            x, y = self._random_point(rng)
            th = float(rng.uniform(-math.pi, math.pi))
            mu, _ = self.world.traction_at(x, y)
            if mu > 0.5:
                return State2D(x, y, th)
        raise RuntimeError("could not find a drivable start pose")

    def simulate_episode(self, episode: int) -> dict:
        """Drive the scripted teleoperation policy; log measurements, controls and frames."""
        cfg = self.cfg
        rng = _rng(cfg.seed, _COLLECT, episode)
        sense_rng = _rng(cfg.seed, _SENSE, episode)
        pose = self._start_pose(rng)
        goal = self._sample_goal(rng)
        goals_left = cfg.collect.goals_per_episode
        sim_log, frames, truth = [], [], []
        still = 0
        for tick in range(cfg.collect.ticks_per_episode):
            z = sense_pose(pose, cfg.noise, sense_rng)
            frames.append(self._sensor_frame(tick, pose, sense_rng))
            self._dump_frame(episode, frames[-1])
            if math.hypot(goal[0] - pose.px, goal[1] - pose.py) < cfg.mission.arrival_radius:
                goals_left -= 1
                goal = self._sample_goal(rng)
            u = teleop_control(pose, goal, cfg, rng)
            sim_log.append((z, u))
            truth.append((*pose.as_array(), *map(float, self.world.traction_at(pose.px, pose.py))))
            nxt = step_truth(pose, u, self.world, cfg.tick_dt).state
            moved = math.hypot(nxt.px - pose.px, nxt.py - pose.py) + abs(nxt.theta - pose.theta)
            still = still + 1 if moved < 1e-9 else 0
            pose = nxt
            if still >= cfg.collect.stuck_ticks:
                logger.debug("episode %d: stuck at tick %d", episode, tick)
                break
            if goals_left <= 0:
                break
        return {"episode": episode, "sim_log": sim_log, "frames": frames, "truth": np.array(truth)}

    def collect(self) -> dict:
        self._prepare()
        cfg = self.cfg
        logger.info("=== Data collection: %d episodes ===", cfg.collect.episodes)
        episodes = [
            self.simulate_episode(ep)
            for ep in tqdm(range(cfg.collect.episodes), desc="episodes", disable=not self.progress)
        ]
        usable = []
        for e in episodes:
            if len(e["sim_log"]) >= cfg.estimator.N + 1:
                usable.append(e)
            else:
                logger.warning("episode %d too short for labelling (%d ticks)", e["episode"], len(e["sim_log"]))

        logger.info("=== Labelling (moving horizon estimation) ===")
        labels: list[list[LabelRecord]] = Parallel(n_jobs=cfg.n_jobs)(
            delayed(run_labeling)(e["sim_log"], cfg.estimator) for e in usable
        )

        tuples, diag_rows, label_rows = [], [], []
        N, M, stride = cfg.fusion.frames, cfg.loss.M, cfg.fusion.frame_stride
        for e, lab in zip(usable, labels):
            built, diag = build_dataset(lab, e["frames"], N, M, stride)
            tuples.extend(built)
            diag_rows.append({"episode": e["episode"], **diag.to_dict()})
            for r, tr in zip(lab, e["truth"]):
                label_rows.append(
                    {
                        "episode": e["episode"],
                        "step": r.step,
                        "t": r.step * cfg.tick_dt,
                        "px": r.state.px,
                        "py": r.state.py,
                        "theta": r.state.theta,
                        "mu": r.mu,
                        "nu": r.nu,
                        "excitation_flag": int(r.low_excitation),
                        "converged": int(r.converged),
                        "truth_mu": tr[3],
                        "truth_nu": tr[4],
                    }
                )
        save_table(pd.DataFrame(label_rows), self.out / "labels.csv")
        save_table(pd.DataFrame(diag_rows), self.out / "dataset_diagnostics.csv")
        ds_dir = self.out / "dataset"
        save_dataset(
            tuples,
            ds_dir,
            meta={
                "scenario": cfg.name,
                "seed": cfg.seed,
                "stride": stride,
                "history_span": history_span(N, stride),
                "episodes": len(usable),
                "ticks": int(sum(len(e["sim_log"]) for e in usable)),
            },
        )
        self.write_manifest("collect")
        return {"status": "ok", "dataset": str(ds_dir), "tuples": len(tuples), "episodes": len(usable)}

    # ------------------------------------------------------------------
    # train / eval
    # ------------------------------------------------------------------

    def train(self, dataset_dir: str | Path, variant: str | None = None) -> dict:
        self._prepare()
        cfg = self.cfg
        tuples, _ = load_dataset(dataset_dir)
        fusion = cfg.fusion if variant is None else replace(cfg.fusion, variant=variant)
        model = build_model(fusion, self.camera, NUM_MATERIALS, seed=cfg.loss.rng_seed)
        result = train(tuples, model, cfg.loss, progress=self.progress)
        stem = self.out / f"model_{fusion.variant}"
        save_model(result.model, stem)
        save_table(result.history, self.out / f"loss_curve_{fusion.variant}.csv")
        self.write_manifest("train")
        last = result.history.iloc[-1]
        return {
            "status": "ok",
            "model": str(stem.with_suffix(".json")),
            "variant": fusion.variant,
            "epochs": int(len(result.history)),
            "final_train_loss": float(last["train_loss"]),
            "final_val_mae": float(last["val_mae"]),
        }

    def evaluate(self, dataset_dir: str | Path, model_paths: Sequence[str | Path]) -> pd.DataFrame:
        self._prepare()
        tuples, _ = load_dataset(dataset_dir)
        logger.info("=== Evaluation: %d models on %d tuples ===", len(model_paths), len(tuples))
        frames = [evaluate(tuples, load_model(p), label=Path(p).stem) for p in model_paths]
        per_tuple = pd.concat(frames, ignore_index=True)
        save_table(per_tuple, self.out / "metrics.csv")
        summary = (
            per_tuple.groupby(["model", "variant"], sort=False)
            .agg(tuples=("anchor", "size"), mean_abs_error=("mae", "mean"), mae_mu=("mae_mu", "mean"), mae_nu=("mae_nu", "mean"))
            .reset_index()
        )
        save_table(summary, self.out / "metrics_summary.csv")
        self.write_manifest("eval")
        return summary

    # ------------------------------------------------------------------
    # navigate
    # ------------------------------------------------------------------

    def _predict(self, source: str, model: TraversabilityNet | None, buffer, est: State2D, truth: State2D) -> TraversabilityMap:
        spec = self.grid
        if source == "truth":
            return local_truth_map(self.world, truth, spec)
        if source == "model":
            frames = model.frames
        else:
            frames = self.cfg.fusion.frames
        hist = select_history(buffer, frames, self.cfg.fusion.frame_stride)
        ext = compose_extrinsics([p for p, _ in hist], [f.extrinsic for _, f in hist], est)
        if source == "geometric":
            return geometric_map([f.depth for _, f in hist], ext, self.camera, spec)
        obs = torch.stack(
            [encode_observation(f.material, f.surface_depth, model.bins, model.num_classes) for _, f in hist]
        )
        return model.predict_map(obs, np.stack([f.depth for _, f in hist]), ext)

    def navigate(self, model: TraversabilityNet | str | Path | None = None, map_source: str | None = None) -> RunReport:
        self._prepare()
        cfg = self.cfg
        source = map_source or cfg.map_source
        if isinstance(model, (str, Path)):
            model = load_model(model)
        if source == "model" and model is None:
            raise ValueError("map_source 'model' needs a trained model (--model)")
        logger.info("=== Navigation: %s, map source %s ===", cfg.name, source)

        world = self.world
        sense_rng = _rng(cfg.seed, _SENSE, 10_000)
        truth = State2D(*map(float, cfg.mission.start))
        mission = [tuple(map(float, w)) for w in cfg.mission.waypoints]
        ref = Reference.create(mission, cfg.mission.arrival_radius)
        estimator = MovingHorizonEstimator(cfg.estimator)
        controller = MPCController(cfg.mpc, seed=int(_rng(cfg.seed, _MPC).integers(2**31)))
        span = history_span(cfg.fusion.frames, cfg.fusion.frame_stride)
        buffer: deque = deque(maxlen=span)
        maps_dir = self.out / "maps"

        rows = []
        u_prev: Control | None = None
        still, reason = 0, "max_ticks"
        tmap = None
        est = truth
        ticks = 0
        for tick in tqdm(range(cfg.max_ticks), desc="ticks", disable=not self.progress):
            z = sense_pose(truth, cfg.noise, sense_rng)
            frame = self._sensor_frame(tick, truth, sense_rng)
            est = estimator.push(z, u_prev)
            buffer.append((est, frame))
            ref = advance_waypoint(est, ref)
            if ref.complete:
                reason = "mission_complete"
                break
            tmap = self._predict(source, model, buffer, est, truth)
            if cfg.save_maps:
                write_map(tmap, maps_dir / f"tick_{tick:05d}")
            local_wps = [relative_pose(est.as_array(), (wx, wy, 0.0))[:2] for wx, wy in ref.waypoints]
            local_ref = Reference(tuple(local_wps), ref.arrival_radius, ref.reached)
            sol = controller.step(State2D(0.0, 0.0, 0.0), local_ref, tmap, keep_samples=cfg.dump_samples)
            if cfg.dump_samples and sol.samples is not None:
                (self.out / "samples").mkdir(parents=True, exist_ok=True)
                np.save(self.out / "samples" / f"tick_{tick:05d}.npy", sol.samples)
            u = sol.control
            mu_t, nu_t = world.traction_at(truth.px, truth.py)
            rows.append(
                {
                    "tick": tick,
                    "t": tick * cfg.tick_dt,
                    "px": truth.px,
                    "py": truth.py,
                    "theta": truth.theta,
                    "est_px": est.px,
                    "est_py": est.py,
                    "est_theta": est.theta,
                    "v": u.v,
                    "omega": u.omega,
                    "best_cost": sol.diagnostics.best_cost,
                    "selected_cost": sol.diagnostics.selected_cost,
                    "stuck": int(sol.diagnostics.stuck),
                    "waypoint_index": ref.reached,
                    "truth_mu": float(mu_t),
                    "truth_nu": float(nu_t),
                }
            )
            nxt = step_truth(truth, u, world, cfg.tick_dt).state
            moved = math.hypot(nxt.px - truth.px, nxt.py - truth.py) + abs(nxt.theta - truth.theta)
            still = still + 1 if (sol.diagnostics.stuck or moved < 1e-9) else 0
            truth, u_prev = nxt, u
            ticks = tick + 1
            if still > cfg.stuck_ticks:
                reason = "stuck"
                logger.warning("robot stuck for %d ticks at (%.2f, %.2f); aborting", still, truth.px, truth.py)
                break

        mu_t, nu_t = world.traction_at(truth.px, truth.py)
        rows.append(
            {
                "tick": ticks,
                "t": ticks * cfg.tick_dt,
                "px": truth.px,
                "py": truth.py,
                "theta": truth.theta,
                "est_px": est.px,
                "est_py": est.py,
                "est_theta": est.theta,
                "v": np.nan,
                "omega": np.nan,
                "best_cost": np.nan,
                "selected_cost": np.nan,
                "stuck": 0,
                "waypoint_index": ref.reached,
                "truth_mu": float(mu_t),
                "truth_nu": float(nu_t),
            }
        )
        log = pd.DataFrame(rows)
        log_path = self.out / "trajectory.csv"
        save_table(log, log_path, decimals=9)
        xy = log[["px", "py"]].to_numpy()
        path_length = float(np.sum(np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1]))))
        last_wp = mission[-1]
        report = RunReport(
            success=ref.complete,
            reason=reason,
            ticks_used=ticks,
            path_length=path_length,
            min_traversability_crossed=float(log["truth_mu"].min()),
            final_goal_distance=float(math.hypot(last_wp[0] - truth.px, last_wp[1] - truth.py)),
            waypoints_reached=ref.reached,
            waypoints_total=len(mission),
            map_source=source,
            log_path=str(log_path),
        )
        save_json(report.to_dict(), self.out / "run_report.json")
        plot_overview(world, xy, cfg.mission.waypoints, (tmap, est) if tmap is not None else None, self.out / "overview.png")
        self.write_manifest("navigate")
        logger.info("  %s after %d ticks (%s), path %.2f m", "SUCCESS" if report.success else "FAILURE", ticks, reason, path_length)
        return report

    # ------------------------------------------------------------------
    # provenance
    # ------------------------------------------------------------------

    def write_manifest(self, command: str) -> Path:
        import platform
        import sys

        path = self.out / "manifest.json"
        commands = []
        if path.exists():
            try:
                commands = json.loads(path.read_text(encoding="utf-8")).get("commands", [])
            except (json.JSONDecodeError, OSError):
                logger.warning("existing manifest unreadable; starting a new one")
        commands.append(command)
        artifacts = [
            {"path": str(p.relative_to(self.out)), "bytes": p.stat().st_size, "sha256": sha256_file(p)}
            for p in sorted(self.out.rglob("*"))
            if p.is_file() and p.name != "manifest.json" and not _PER_TICK_DIRS & set(p.relative_to(self.out).parts[:-1])
        ]
        manifest = {
            "tool": TOOL,
            "tool_version": __version__,
            "python": sys.version.split()[0],
            "platform": platform.platform(),
            "scenario": self.cfg.name,
            "seed": self.cfg.seed,
            "commands": commands,
            "artifacts": artifacts,
            "config_snapshot": asdict(self.cfg),
        }
        try:
            import scipy
            import sklearn

            manifest["package_versions"] = {
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__,
                "torch": torch.__version__,
            }
        except ImportError:
            pass
        return save_json(manifest, path)


def plot_overview(world: World, path_xy, waypoints, last_map, out_path: Path) -> Path | None:
    """World truth mu with the driven path, waypoints and (optionally) the last local map."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        logger.warning("overview plot skipped: %s", e)
        return None

    ncols = 2 if last_map is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 5.5), squeeze=False)
    ax = axes[0, 0]
    ax.imshow(world.truth_mu, origin="lower", extent=(0, world.width, 0, world.height), cmap="viridis", vmin=0, vmax=1)
    if path_xy is not None and len(path_xy):
        ax.plot(path_xy[:, 0], path_xy[:, 1], "r-", lw=1.5, label="path")
        ax.plot(path_xy[0, 0], path_xy[0, 1], "wo", ms=5)
    wp = np.asarray(waypoints, dtype=float)
    if wp.size:
        ax.plot(wp[:, 0], wp[:, 1], "w*", ms=10, label="waypoints")
    ax.set_title("truth mu")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if last_map is not None:
        tmap, est = last_map
        x0, x1, y0, y1 = tmap.extent
        im = axes[0, 1].imshow(tmap.mu, origin="lower", extent=(x0, x1, y0, y1), cmap="viridis", vmin=0, vmax=1)
        axes[0, 1].plot(0, 0, "r^", ms=8)
        axes[0, 1].set_title(f"last local map (robot at {est.px:.1f}, {est.py:.1f})")
        fig.colorbar(im, ax=axes[0, 1], fraction=0.046)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    logger.info("  → %s", out_path)
    return out_path
