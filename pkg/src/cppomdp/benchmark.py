"""Reduced-scale comparison of all five strategies on one task.

The three networked-control baselines train first and independently.  The
joint strategies then start from the CC robot, which stands in for their
first robot phase: that phase would train against the same fixed CC
sensors.  Independent jobs run in parallel processes when cores allow.

    python -m cppomdp.benchmark --config configs/desk.yaml --out runs/desk
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from .config import RunConfig, dump_config, load_config
from .learner import load_checkpoint
from .training import Trainer, write_run

log = logging.getLogger(__name__)

BASELINES = ("oc", "cc", "rc")
JOINT = ("cjcc", "djcc")


def fingerprint(cfg: RunConfig) -> str:
    """Hash of the config and the package source; a cached comparison is reused only on a match."""
    h = hashlib.sha256(dump_config(cfg).encode())
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _job(cfg_text: str, strategy: str, out: str, initial: str | None) -> dict[str, Any]:
    import yaml

    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    cfg = RunConfig.from_mapping(yaml.safe_load(cfg_text)).replace(strategy=strategy)
    robot = load_checkpoint(initial)[0] if initial else None
    t0 = time.perf_counter()
    result = Trainer(cfg, progress=lambda m: log.info(m)).train(strategy, initial_robot=robot)
    metrics = write_run(cfg, strategy, result, out)
    sensor = [p for p in result.phases if p.kind == "sensor" and p.n_step]
    return {
        "strategy": strategy,
        "test": metrics.summary,
        "timeouts": int(sum(x >= cfg.task.steps_per_episode for x in metrics.n_step)),
        "test_collision_rate": metrics.collision_rate,
        "sensor_collision_rate": [{"phase": p.name, "first_10pct": p.collision_rate(0.0, 0.1),
                                   "last_10pct": p.collision_rate(0.9, 1.0)} for p in sensor],
        "seconds": round(time.perf_counter() - t0, 1),
    }


def _stage(jobs: list[tuple], workers: int) -> list[dict[str, Any]]:
    if workers <= 1 or len(jobs) == 1:
        return [_job(*j) for j in jobs]
    import multiprocessing as mp

    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(_job, *zip(*jobs)))


def check(results: dict[str, dict[str, Any]]) -> dict[str, Any]:
    """Median ordering OC <= CJCC <= CC <= RC, OC at least 20% below RC, and fewer DJCC collisions late."""
    med = {k: v["test"]["p50"] for k, v in results.items()}
    order = med["oc"] <= med["cjcc"] <= med["cc"] <= med["rc"]
    gap = med["oc"] <= 0.8 * med["rc"]
    phases = results["djcc"]["sensor_collision_rate"]
    collisions = bool(phases) and all(p["last_10pct"] < p["first_10pct"] for p in phases)
    return {"medians": med, "ordering": order, "oc_gap": gap, "djcc_collisions_drop": collisions}


def run_comparison(cfg: RunConfig, out_dir: str | Path, workers: int | None = None,
                   reuse: bool = True) -> dict[str, Any]:
    out = Path(out_dir)
    summary_path = out / "summary.json"
    fp = fingerprint(cfg)
    if reuse and summary_path.exists():
        cached = json.loads(summary_path.read_text())
        if cached.get("fingerprint") == fp:
            return cached
    workers = workers or os.cpu_count() or 1
    out.mkdir(parents=True, exist_ok=True)
    text = dump_config(cfg)
    t0 = time.perf_counter()
    results: dict[str, dict[str, Any]] = {}
    for r in _stage([(text, s, str(out / s), None) for s in BASELINES], workers):
        results[r["strategy"]] = r
    warm = str(out / "cc" / "checkpoints" / "robot.ckpt")
    for r in _stage([(text, s, str(out / s), warm) for s in JOINT], workers):
        results[r["strategy"]] = r
    summary = {
        "fingerprint": fp,
        "workers": workers,
        "seconds": round(time.perf_counter() - t0, 1),
        "results": results,
        "checks": check(results),
    }
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True, default=_plain) + "\n")
    return summary


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m cppomdp.benchmark", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, help="parallel processes (default: CPU count)")
    p.add_argument("--fresh", action="store_true", help="ignore a cached summary")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    summary = run_comparison(load_config(args.config), args.out, args.workers, reuse=not args.fresh)
    print(json.dumps({"seconds": summary["seconds"], "checks": summary["checks"]}, indent=1))
    c = summary["checks"]
    return 0 if c["ordering"] and c["oc_gap"] and c["djcc_collisions_drop"] else 1


if __name__ == "__main__":
    sys.exit(main())
