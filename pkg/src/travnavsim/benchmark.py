"""Timings and closed-loop acceptance runs.

``timing`` measures the estimator per window and the controller per tick.
``acceptance`` drives the full collect → train → navigate/eval cycle on the
built-in scenarios and checks the navigation, appearance/geometry mismatch
and variant-ordering properties.
"""

from __future__ import annotations
import copy
import json
import logging
import time
from pathlib import Path
import numpy as np
import pandas as pd

from .config import EstimatorConfig, MPCConfig

logger = logging.getLogger(__name__)

TOOL = "trav-nav-sim"
SUITES = ("timing", "acceptance", "all")


def _row(suite, check, value, threshold, passed, elapsed):
    return {
        "suite": suite,
        "check": check,
        "value": None if value is None else round(float(value), 6),
        "threshold": threshold,
        "passed": passed,
        "elapsed_sec": round(elapsed, 4),
    }


def _exciting_controls(rng, n):
    v = rng.uniform(0.5, 1.0, n)
    w = rng.uniform(0.3, 1.0, n) * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return np.stack([v, w], axis=1)


def _mhe_windows(rng, n_windows, cfg, gnss_sigma=0.0, compass_sigma=0.0):
    from .dynamics.kinodynamics import State2D, rollout_const
    from .estimation.mhe import MeasurementWindow, ParamVector, solve_mhe
    from .geometry import wrap_angle

    errors, times = [], []
    for _ in range(n_windows):
        truth = np.array([rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(-0.5, 0.5)])
        x0 = State2D(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(-np.pi, np.pi))
        U = _exciting_controls(rng, cfg.N)
        z = rollout_const(x0, U, truth[0], truth[1], cfg.dt).states.copy()
        z[:, :2] += rng.normal(0.0, gnss_sigma, size=(z.shape[0], 2)) if gnss_sigma > 0 else 0.0
        z[:, 2] = wrap_angle(z[:, 2] + truth[2] + (rng.normal(0.0, compass_sigma, z.shape[0]) if compass_sigma > 0 else 0.0))
        prior = State2D(z[0, 0], z[0, 1], float(wrap_angle(z[0, 2])))
        window = MeasurementWindow(z, U, prior, ParamVector(1.0, 1.0, 0.0))
        t = time.perf_counter()
        res = solve_mhe(window, cfg)
        times.append(time.perf_counter() - t)
        got = np.array([res.params.mu, res.params.nu, res.params.dtheta])
        err = np.abs(got - truth)
        err[2] = abs(float(wrap_angle(got[2] - truth[2])))
        errors.append(err)
    return np.array(errors), np.array(times)


def _timing_suite(seed, mhe_windows=50, mpc_ticks=20):
    from .control.mpc import Reference, solve_mpc
    from .dynamics.kinodynamics import State2D
    from .maps import TraversabilityMap

    rng = np.random.default_rng(seed)
    rows = []

    exact_cfg = EstimatorConfig(N=20, Px=[0.0, 0.0, 0.0], Pm=[0.0, 0.0, 0.0])
    t = time.perf_counter()
    err, times = _mhe_windows(rng, mhe_windows, exact_cfg)
    worst = float(err.max())
    rows.append(_row("timing", "mhe_noise_free_max_param_error", worst, "< 1e-4", worst < 1e-4, time.perf_counter() - t))
    rows.append(_row("timing", "mhe_ms_per_window", 1e3 * times.mean(), "< 5 ms", None, float(times.sum())))

    noisy_cfg = EstimatorConfig(N=20, Px=[0.0, 0.0, 0.0], Pm=[1e-3, 1e-3, 1e-3])
    t = time.perf_counter()
    err, _ = _mhe_windows(rng, mhe_windows, noisy_cfg, gnss_sigma=0.05, compass_sigma=0.02)
    mean = float(err.mean())
    rows.append(_row("timing", "mhe_noisy_mean_param_error", mean, "< 0.05", mean < 0.05, time.perf_counter() - t))

    mpc_cfg = MPCConfig()
    cells = rng.uniform(0.3, 1.0, size=(100, 100))
    tmap = TraversabilityMap((-5.0, -5.0), 0.1, cells, cells)
    ref = Reference.create([(4.0, 1.0)])
    times = []
    for _ in range(mpc_ticks):
        t = time.perf_counter()
        solve_mpc(State2D(0.0, 0.0, 0.0), ref, tmap, mpc_cfg, rng)
        times.append(time.perf_counter() - t)
    rows.append(_row("timing", "mpc_ms_per_tick", 1e3 * float(np.mean(times)), f"{mpc_cfg.num_samples} samples", None, float(np.sum(times))))
    return rows


def _trained(cfg, workdir, progress, variant=None):
    """Collect a dataset and train one model; returns (runner, model descriptor path)."""
    from .runner import ScenarioRunner

    runner = ScenarioRunner(cfg, workdir, progress=progress)
    ds = runner.collect()["dataset"]
    return runner, ds, runner.train(ds, variant=variant)["model"]


def _navigate_seed(cfg, seed, out, model_path, map_source, progress):
    from .runner import ScenarioRunner

    c = copy.deepcopy(cfg)
    c.seed = int(seed)
    return ScenarioRunner(c, out, progress=progress).navigate(model_path, map_source=map_source)


def _closed_loop(workdir, seeds, progress):
    from .scenarios import wall_gap

    t = time.perf_counter()
    cfg = wall_gap()
    _, _, model = _trained(cfg, workdir / "wall_gap" / "train", progress)
    reports = [
        _navigate_seed(cfg, s, workdir / "wall_gap" / f"seed_{s}", model, "model", progress) for s in range(seeds)
    ]
    n_ok = sum(r.success for r in reports)
    min_mu = min(r.min_traversability_crossed for r in reports)
    need = int(np.ceil(0.9 * seeds))
    return [
        _row("acceptance", "wall_gap_successes", n_ok, f">= {need}/{seeds}", n_ok >= need, time.perf_counter() - t),
        _row("acceptance", "wall_gap_min_truth_mu", min_mu, ">= 0.1", min_mu >= 0.1, 0.0),
    ]


def _mismatch(workdir, progress):
    from .scenarios import tall_grass

    t = time.perf_counter()
    cfg = tall_grass()
    _, _, model = _trained(cfg, workdir / "tall_grass" / "train", progress)
    learned = _navigate_seed(cfg, cfg.seed, workdir / "tall_grass" / "model", model, "model", progress)
    geometric = _navigate_seed(cfg, cfg.seed, workdir / "tall_grass" / "geometric", None, "geometric", progress)
    ratio = learned.path_length / geometric.path_length if geometric.path_length > 0 else float("inf")
    passed = learned.success and geometric.success and ratio < 0.8
    return [
        _row("acceptance", "tall_grass_path_ratio_model_vs_geometric", ratio, "< 0.8, both successful", passed, time.perf_counter() - t)
    ]


def _ablation(workdir, progress, train_seeds=(0, 1, 2)):
    from .runner import ScenarioRunner
    from .scenarios import occlusion

    t = time.perf_counter()
    cfg = occlusion()
    train_ds = ScenarioRunner(cfg, workdir / "occlusion" / "collect", progress=progress).collect()["dataset"]
    held = copy.deepcopy(cfg)
    held.seed = cfg.seed + 1000
    held_ds = ScenarioRunner(held, workdir / "occlusion" / "heldout", progress=progress).collect()["dataset"]

    models = []
    for s in train_seeds:
        c = copy.deepcopy(cfg)
        c.loss.rng_seed = int(s)
        runner = ScenarioRunner(c, workdir / "occlusion" / f"train_seed_{s}", progress=progress)
        for variant in ("vision_only", "voxel", "temporal"):
            models.append(runner.train(train_ds, variant=variant)["model"])
    summary = ScenarioRunner(cfg, workdir / "occlusion" / "eval", progress=progress).evaluate(held_ds, models)
    err = summary.groupby("variant")["mean_abs_error"].mean()
    vis, vox, tem = float(err["vision_only"]), float(err["voxel"]), float(err["temporal"])
    logger.info("  variant errors: vision_only %.4f, voxel %.4f, temporal %.4f", vis, vox, tem)
    passed = tem <= vox <= vis and tem <= 0.9 * vis
    return [
        _row("acceptance", "ablation_vision_only_mae", vis, None, None, 0.0),
        _row("acceptance", "ablation_voxel_mae", vox, None, None, 0.0),
        _row(
            "acceptance",
            "ablation_temporal_mae",
            tem,
            "temporal <= voxel <= vision_only, temporal <= 0.9 x vision_only",
            passed,
            time.perf_counter() - t,
        ),
    ]


def run_benchmark(out_path=None, suite="timing", seeds=10, workdir="travnav_benchmark", progress=True, seed=123, mhe_windows=50):
    if suite not in SUITES:
        raise ValueError(f"benchmark suite must be one of {SUITES}, got {suite!r}")
    rows = []
    if suite in ("timing", "all"):
        logger.info("=== Benchmark: timing ===")
        rows += _timing_suite(seed, mhe_windows=mhe_windows)
    if suite in ("acceptance", "all"):
        if seeds < 1:
            raise ValueError(f"seeds must be >= 1, got {seeds}")
        work = Path(workdir)
        logger.info("=== Benchmark: acceptance (work dir %s) ===", work)
        rows += _closed_loop(work, seeds, progress)
        rows += _mismatch(work, progress)
        rows += _ablation(work, progress)
    checked = [r for r in rows if r["passed"] is not None]
    if suite == "timing" and all(r["passed"] for r in checked):
        status = "OK"
    else:
        status = "PASS" if all(r["passed"] for r in checked) else "FAIL"
    out = {"tool": TOOL, "suite": suite, "status": status, "results": rows}
    if out_path:
        Path(out_path).write_text(json.dumps(out, indent=2))
    return out


def run_benchmark_with_plots(out_dir, suite="timing", seeds=10, seed=123, mhe_windows=50):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = run_benchmark(None, suite=suite, seeds=seeds, workdir=out_dir / "runs", progress=False, seed=seed, mhe_windows=mhe_windows)
    (out_dir / "benchmark.json").write_text(json.dumps(js, indent=2))
    df = pd.DataFrame(js.get("results", []))
    if not df.empty:
        df.insert(0, "tool", js.get("tool", "unknown"))
        df.to_csv(out_dir / "benchmark.csv", index=False)
        timed = df[df["elapsed_sec"] > 0]
        fig = plt.figure(figsize=(6, 4))
        plt.barh(timed["check"], timed["elapsed_sec"])
        plt.xlabel("Time (s)")
        plt.tight_layout()
        fig.savefig(out_dir / "benchmark_runtime.png", dpi=160)
        plt.close(fig)
    return js
