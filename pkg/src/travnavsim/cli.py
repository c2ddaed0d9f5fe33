from __future__ import annotations
import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import MAP_SOURCES, MODEL_VARIANTS, ConfigError, ScenarioConfig

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="Path to YAML/JSON scenario config")
    p.add_argument("--scenario", default=None, help="Built-in scenario name (used when --config is absent)")
    p.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    p.add_argument("--out", default=None, help="Output directory (default: config output_dir)")
    p.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")


def _build_parser():
    p = argparse.ArgumentParser(
        prog="trav-nav-sim",
        description="Traversability learning and navigation in a synthetic world",
    )
    p.add_argument("--version", action="store_true", help="Print version and exit")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("worldgen", help="Build the world and write its truth maps")
    _common(s)

    s = sub.add_parser("collect", help="Drive the scripted policy, label with MHE, write a dataset")
    _common(s)

    s = sub.add_parser("train", help="Train the stand-in model on a dataset")
    _common(s)
    s.add_argument("--dataset", default=None, help="Dataset directory (default: <out>/dataset)")
    s.add_argument("--variant", choices=MODEL_VARIANTS, default=None, help="Model variant override")

    s = sub.add_parser("navigate", help="Run the closed loop to the mission waypoints")
    _common(s)
    s.add_argument("--model", default=None, help="Model descriptor (.json) for map source 'model'")
    s.add_argument("--map-source", choices=MAP_SOURCES, default=None, help="Map source override")

    s = sub.add_parser("eval", help="Mean absolute traversability error of one or more models")
    _common(s)
    s.add_argument("--dataset", default=None, help="Held-out dataset directory (default: <out>/dataset)")
    s.add_argument("--model", action="append", default=[], help="Model descriptor; repeat for several")

    s = sub.add_parser("selfcheck", help="Import and numeric sanity checks")
    s.add_argument("--report", default=None, help="Optional path to save the JSON report")
    s.add_argument("--quiet", action="store_true")

    s = sub.add_parser("benchmark", help="Timings and closed-loop acceptance runs")
    s.add_argument("--suite", choices=("timing", "acceptance", "all"), default="timing")
    s.add_argument("--seeds", type=int, default=10, help="Seeds for the closed-loop acceptance run")
    s.add_argument("--out", default="travnav_benchmark", help="Work directory for acceptance runs")
    s.add_argument("--report", default=None, help="Optional path to save the JSON report")
    s.add_argument("--plots", default=None, help="Directory for benchmark.json, benchmark.csv and a runtime plot")
    s.add_argument("--quiet", action="store_true")
    return p


def _setup_logging(quiet: bool) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _load_config(args) -> ScenarioConfig:
    if args.config:
        cfg = ScenarioConfig.from_yaml(args.config)
    elif args.scenario:
        from .scenarios import get_scenario

        cfg = get_scenario(args.scenario)
    else:
        cfg = ScenarioConfig()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.out:
        cfg.output_dir = args.out
    return cfg.validate()


def _emit(rep: dict) -> None:
    print(json.dumps(rep, indent=2, ensure_ascii=False, default=str))


def _run(args) -> int:
    if args.command == "selfcheck":
        from .selfcheck import run_self_check

        rep = run_self_check(args.report)
        _emit(rep)
        return EXIT_OK if rep.get("status") == "PASS" else EXIT_FAILURE

    if args.command == "benchmark":
        from .benchmark import run_benchmark, run_benchmark_with_plots

        if args.plots:
            rep = run_benchmark_with_plots(args.plots, suite=args.suite, seeds=args.seeds)
        else:
            rep = run_benchmark(args.report, suite=args.suite, seeds=args.seeds, workdir=args.out, progress=not args.quiet)
        _emit(rep)
        return EXIT_OK if rep.get("status") in ("PASS", "OK") else EXIT_FAILURE

    from .runner import ScenarioRunner

    cfg = _load_config(args)
    runner = ScenarioRunner(cfg, progress=not args.quiet)
    out = Path(cfg.output_dir)

    if args.command == "worldgen":
        _emit(runner.worldgen())
        return EXIT_OK
    if args.command == "collect":
        _emit(runner.collect())
        return EXIT_OK
    if args.command == "train":
        from .training.trainer import TrainingDivergedError

        try:
            rep = runner.train(args.dataset or out / "dataset", variant=args.variant)
        except TrainingDivergedError as e:
            _emit({"status": "failed", "reason": "training_diverged", "detail": str(e)})
            return EXIT_FAILURE
        _emit(rep)
        return EXIT_OK
    if args.command == "navigate":
        report = runner.navigate(args.model, map_source=args.map_source)
        _emit({"status": "ok" if report.success else "failed", **report.to_dict()})
        return EXIT_OK if report.success else EXIT_FAILURE
    if args.command == "eval":
        if not args.model:
            raise ConfigError("eval needs at least one --model")
        summary = runner.evaluate(args.dataset or out / "dataset", args.model)
        _emit({"status": "ok", "metrics": str(out / "metrics.csv"), "summary": summary.to_dict(orient="records")})
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    p = _build_parser()
    args = p.parse_args(argv)

    if args.version:
        print(__version__)
        return EXIT_OK
    if not args.command:
        p.print_help(sys.stderr)
        return EXIT_INVALID

    _setup_logging(getattr(args, "quiet", False))
    try:
        return _run(args)
    except (ValueError, FileNotFoundError) as e:
        # ConfigError, WorldSpecError and DatasetError are ValueErrors
        _emit({"status": "invalid", "error": type(e).__name__, "detail": str(e)})
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
