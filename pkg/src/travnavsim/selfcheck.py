from __future__ import annotations
import json
import platform
import sys
import time
import importlib
from pathlib import Path
import numpy as np

try:
    from . import __version__
except Exception:
    __version__ = "unknown"


def _try_import(name):
    try:
        importlib.import_module(name)
        return True, None
    except Exception as e:
        return False, str(e)


def _check(name, fn):
    try:
        ok, detail = fn()
        return {"name": name, "ok": bool(ok), "severity": "required", "detail": detail}
    except Exception as e:
        return {"name": name, "ok": False, "severity": "required", "detail": f"{type(e).__name__}: {e}"}


def _bilinear_gradient():
    from .maps import TraversabilityMap, sample_map_bilinear

    rng = np.random.default_rng(0)
    m = TraversabilityMap((0.0, 0.0), 0.5, rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6)))
    p = np.array([1.37, 1.81])
    s = sample_map_bilinear(m, p)
    h = 1e-6
    fd = np.array(
        [
            (sample_map_bilinear(m, p + e).mu - sample_map_bilinear(m, p - e).mu) / (2 * h)
            for e in (np.array([h, 0.0]), np.array([0.0, h]))
        ]
    )
    err = float(np.max(np.abs(fd - s.dmu_dp)))
    return err < 1e-5, f"max |analytic - finite difference| = {err:.2e}"


def _splat_mass():
    import torch

    from .config import CameraSpec
    from .fusion.bev import DepthBins, FeatureImage, GridSpec, lift_frustum, splat_to_voxels
    from .geometry import camera_from_spec, transform_points

    cam = camera_from_spec(CameraSpec(width=8, height=6))
    bins = DepthBins(0.5, 4.0, 8)
    spec = GridSpec((-5.0, -5.0, -4.0), 0.25, 0.5, 40, 40, 12)
    gen = torch.Generator().manual_seed(0)
    ctx = torch.rand(3, 6, 8, generator=gen, dtype=torch.float64)
    logits = torch.randn(8, 6, 8, generator=gen, dtype=torch.float64)
    feat = FeatureImage(ctx, torch.softmax(logits, dim=0), logits)
    cloud = lift_frustum(feat, bins, cam)
    _, inside = spec.flat_index(transform_points(cam.extrinsic, cloud.points))
    grid = splat_to_voxels(cloud, cam.extrinsic, spec)
    expected = float(cloud.features[torch.from_numpy(inside)].sum())
    err = abs(grid.mass() - expected)
    return err < 1e-9 and bool(inside.all()), f"mass error {err:.2e}, {int(inside.sum())}/{inside.size} points in grid"


def _mhe_recovery():
    from .config import EstimatorConfig
    from .dynamics.kinodynamics import State2D, rollout_const
    from .estimation.mhe import MeasurementWindow, ParamVector, solve_mhe
    from .geometry import wrap_angle

    cfg = EstimatorConfig(N=10, Px=[0.0, 0.0, 0.0], Pm=[0.0, 0.0, 0.0])
    U = np.array([[1.0, 0.5 if i % 2 == 0 else -0.3] for i in range(cfg.N)])
    traj = rollout_const(State2D(1.0, 2.0, 0.3), U, 0.7, 0.6, cfg.dt)
    z = traj.states.copy()
    z[:, 2] = wrap_angle(z[:, 2] + 0.1)
    window = MeasurementWindow(z, U, State2D(1.0, 2.0, 0.2), ParamVector(1.0, 1.0, 0.0))
    res = solve_mhe(window, cfg)
    got = np.array([res.params.mu, res.params.nu, res.params.dtheta])
    err = float(np.max(np.abs(got - np.array([0.7, 0.6, 0.1]))))
    return err < 1e-4, f"max parameter error {err:.2e} after {res.diagnostics.iterations} iterations"


def _clearance_area():
    from .control.mpc import clearance_minpool
    from .maps import TraversabilityMap

    mu = np.ones((9, 9))
    mu[4, 4] = 0.0
    m = clearance_minpool(TraversabilityMap((0.0, 0.0), 0.1, mu, mu), 3)
    n = int(np.sum(m.mu == 0.0))
    return n == 9, f"{n} blocked cells from one 3x3-inflated obstacle"


def run_self_check(report_path=None):
    t0 = time.perf_counter()
    checks = []
    required_modules = [
        "travnavsim.config",
        "travnavsim.world.sim",
        "travnavsim.world.sensors",
        "travnavsim.dynamics.kinodynamics",
        "travnavsim.estimation.mhe",
        "travnavsim.fusion.bev",
        "travnavsim.training.trainer",
        "travnavsim.control.mpc",
        "travnavsim.runner",
    ]
    optional_modules = ["matplotlib"]
    for mod in required_modules + optional_modules:
        ok, err = _try_import(mod)
        checks.append(
            {
                "name": mod,
                "ok": ok,
                "severity": "required" if mod in required_modules else "optional",
                "detail": err,
            }
        )
    checks.append(_check("bilinear_gradient_matches_finite_difference", _bilinear_gradient))
    checks.append(_check("splat_conserves_feature_mass", _splat_mass))
    checks.append(_check("mhe_recovers_noise_free_parameters", _mhe_recovery))
    checks.append(_check("clearance_minpool_inflates_k_squared", _clearance_area))
    status = all(c["ok"] for c in checks if c["severity"] == "required")
    functional_checklist = [
        {"id": "world_sim", "label": "material world, GNSS/compass and depth sensors", "required": True, "implemented": True},
        {"id": "mhe_labels", "label": "moving-horizon traction labeling", "required": True, "implemented": True},
        {"id": "bev_fusion", "label": "lift-splat voxel fusion with temporal alignment", "required": True, "implemented": True},
        {"id": "self_supervised_training", "label": "LDS-weighted trajectory loss + depth loss", "required": True, "implemented": True},
        {"id": "sampling_mpc", "label": "sampling MPC with clearance and angular scaling", "required": True, "implemented": True},
        {"id": "run_manifest", "label": "manifest.json provenance", "required": True, "implemented": True},
        {
            "id": "overview_plot",
            "label": "matplotlib overview figure",
            "required": False,
            "implemented": any(c["name"] == "matplotlib" and c["ok"] for c in checks),
        },
        {"id": "self_check", "label": "selfcheck validation report", "required": True, "implemented": True},
        {"id": "benchmark", "label": "timing + acceptance benchmark", "required": True, "implemented": True},
    ]
    out = {
        "schema_version": "1.0",
        "report_type": "validation_self_check",
        "tool": "trav-nav-sim",
        "package": "travnavsim",
        "version": __version__,
        "status": "PASS" if status else "FAIL",
        "summary": {
            "n_required_checks": sum(c["severity"] == "required" for c in checks),
            "n_failed_required": sum((c["severity"] == "required") and (not c["ok"]) for c in checks),
            "n_optional_failed": sum((c["severity"] == "optional") and (not c["ok"]) for c in checks),
        },
        "environment": {
            "python": sys.version.split()[0],
            "platform": platform.platform(),
        },
        "timing": {"elapsed_sec": round(time.perf_counter() - t0, 4)},
        "functional_checklist": functional_checklist,
        "checks": checks,
    }
    if report_path:
        Path(report_path).write_text(json.dumps(out, indent=2, ensure_ascii=False))
    return out
