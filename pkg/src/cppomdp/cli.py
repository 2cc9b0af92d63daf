"""Command-line entry point: ``cppomdp {train,eval,plot,replay}``.

Exit codes: 0 success, 1 replay mismatch, 2 configuration error, 3 training fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import STRATEGIES, TASKS, ConfigError, RunConfig, dump_config, load_config
from .core import EpisodeLog
from .learner import TrainingFault, load_checkpoint
from .metrics import PhaseRecord, export_run, read_heatmap, render_boxplot, render_curves, render_heatmap
from .policies import StrategyKind
from .training import SensorSide, Trainer, evaluate, replay_wave, run_manifest, write_run

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2, 3

log = logging.getLogger("cppomdp")


def _parse_set(items: Sequence[str]) -> dict[str, Any]:
    import yaml

    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _resolve_config(args) -> RunConfig:
    overrides = _parse_set(args.set or [])
    for key in ("task", "strategy", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    return load_config(args.config, **overrides)


def _load_run(run_dir: Path) -> tuple[RunConfig, str, Any, SensorSide, dict[str, Any]]:
    """Config, strategy, robot net and sensor side of an exported run directory."""
    cfg = load_config(run_dir / "config.yaml")
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    strategy = manifest.get("strategy", cfg.strategy)
    kind = StrategyKind(strategy)
    ck = run_dir / "checkpoints"
    robot, _ = load_checkpoint(ck / "robot.ckpt")
    if kind.learned_sensors:
        paths = sorted(ck.glob("sensor_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
        sensors = SensorSide(nets=[load_checkpoint(p)[0] for p in paths], distributed=kind.distributed)
    else:
        sensors = SensorSide(fixed=kind.value)
    return cfg, strategy, robot, sensors, manifest


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.episodes is not None:
        cfg = cfg.replace(n_train_robot=args.episodes)
    strategy = cfg.strategy
    trainer = Trainer(cfg, progress=lambda m: log.info(m))
    initial = None
    if args.checkpoint:
        initial, _ = load_checkpoint(args.checkpoint)
    result = trainer.train(strategy, initial_robot=initial)
    metrics = write_run(cfg, strategy, result, args.out)
    print(json.dumps({"strategy": strategy, "test": metrics.summary}, sort_keys=True))
    return EXIT_OK



def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint <run directory>")
    cfg, strategy, robot, sensors, _ = _load_run(Path(args.checkpoint))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    n_test = args.episodes if args.episodes is not None else cfg.schedule.n_test
    cfg = cfg.replace(n_test=n_test)
    metrics, logs = evaluate(cfg, strategy, robot, sensors, record=cfg.log_episodes)
    if args.out:
        export_run(metrics, args.out, config_text=dump_config(cfg),
                   manifest=run_manifest(cfg, strategy, [], 0.0, []), episode_logs=logs)
    print(json.dumps({"strategy": strategy, "test": metrics.summary}, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    runs = [Path(p) for p in (args.runs or [])]
    if not runs:
        raise ConfigError("plot needs at least one run directory")
    out = Path(args.out or runs[0])
    out.mkdir(parents=True, exist_ok=True)
    dists = {}
    for run in runs:
        data = json.loads((run / "metrics.json").read_text())
        name = data["strategy"]
        dists[name] = data["test"]["n_step"]
        phases = [PhaseRecord(p["name"], p["kind"], p["phase_id"], n_step=p["n_step"]) for p in data["phases"]]
        render_curves(phases, out / f"curves_{name}.png", name.upper())
        for which in ("location", "transmission"):
            csv = run / f"heatmap_{which}.csv"
            if csv.exists():
                render_heatmap(read_heatmap(csv), out / f"heatmap_{which}_{name}.png", f"{name.upper()} {which}")
    render_boxplot(dists, out / "nstep_boxplot.png", "test N_step")
    return EXIT_OK


def cmd_replay(args) -> int:
    if not args.checkpoint:
        raise ConfigError("replay needs --checkpoint <run directory>")
    run = Path(args.checkpoint)
    cfg, strategy, robot, sensors, manifest = _load_run(run)
    n_test = manifest.get("n_test", cfg.schedule.n_test)
    cfg = cfg.replace(wave_size=manifest.get("wave_size", cfg.wave_size))
    stored = EpisodeLog.loads((run / "episodes" / f"episode_{args.episode:05d}.jsonl").read_text())
    fresh = replay_wave(cfg, strategy, robot, sensors, args.episode, n_test)
    same = fresh.dumps() == stored.dumps()
    print(json.dumps({"episode": args.episode, "identical": same, "n_step": fresh.n_step, "cause": fresh.cause}))
    return EXIT_OK if same else EXIT_MISMATCH


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cppomdp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--task", choices=TASKS)
        sp.add_argument("--strategy", choices=STRATEGIES)
        sp.add_argument("--config", help="YAML key/value config file")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--episodes", type=int, help="override the episode count")
        sp.add_argument("--checkpoint", help="checkpoint file (train) or run directory (eval, replay)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    sp = sub.add_parser("train", help="train a strategy, evaluate it and export the run")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("eval", help="evaluate the checkpoints of an exported run")
    common(sp)
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("plot", help="render curves, heatmaps and a box plot from run directories")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--out", help="figure directory (default: the first run)")
    sp.set_defaults(func=cmd_plot)
    sp = sub.add_parser("replay", help="re-simulate a logged test episode and compare")
    common(sp)
    sp.add_argument("--episode", type=int, default=0, help="test episode index")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    if args.command == "train" and not args.out:
        parser.error("train needs --out")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
