"""Episode-length statistics, heatmaps and run export."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

PERCENTILES = (5, 25, 50, 75, 95)
METRICS_SCHEMA = "cppomdp-metrics"
METRICS_VERSION = 1


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(p / 100 * n))
    return sorted_values[rank - 1]


def nstep_stats(n_steps: Sequence[int]) -> dict[str, float]:
    """Mean plus nearest-rank 5/25/50/75/95 percentiles (timeouts enter as K)."""
    if len(n_steps) == 0:
        raise ValueError("nstep_stats needs at least one episode")
    ordered = sorted(int(x) for x in n_steps)
    out = {"mean": float(np.mean(ordered)), "count": len(ordered)}
    for p in PERCENTILES:
        out[f"p{p}"] = float(nearest_rank(ordered, p))
    return out


def training_curve(n_steps: Sequence[int], window: int = 200, points: int = 200) -> dict[str, list[float]]:
    """Trailing-window mean and quartiles of N_step, sampled at up to ``points`` episodes."""
    x = np.asarray(n_steps, dtype=np.float64)
    if x.size == 0:
        return {"episode": [], "mean": [], "p25": [], "p75": []}
    ends = np.unique(np.linspace(1, x.size, min(points, x.size)).astype(int))
    mean, p25, p75 = [], [], []
    for e in ends:
        w = np.sort(x[max(0, e - window):e])
        mean.append(float(w.mean()))
        p25.append(float(nearest_rank(w, 25)))
        p75.append(float(nearest_rank(w, 75)))
    return {"episode": ends.tolist(), "mean": mean, "p25": p25, "p75": p75}


def normalize(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    return counts / total if total > 0 else np.zeros_like(counts, dtype=np.float64)


@dataclass
class PhaseRecord:
    name: str
    kind: str  # "robot" | "sensor"
    phase_id: int
    n_step: list[int] = field(default_factory=list)
    collisions: list[int] = field(default_factory=list)
    comm_slots: list[int] = field(default_factory=list)
    updates: int = 0
    skipped: bool = False

    def collision_rate(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Collisions per communication slot over the episode fraction [lo, hi)."""
        n = len(self.n_step)
        a, b = int(round(lo * n)), int(round(hi * n))
        slots = sum(self.comm_slots[a:b])
        return sum(self.collisions[a:b]) / slots if slots else 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name, "kind": self.kind, "phase_id": self.phase_id, "episodes": len(self.n_step),
            "updates": self.updates, "skipped": self.skipped,
            "n_step": self.n_step, "curve": training_curve(self.n_step),
            "collision_rate": self.collision_rate() if self.comm_slots else None,
        }


@dataclass
class RunMetrics:
    strategy: str
    task: str
    n_step: list[int]
    location: np.ndarray  # (N, N) visit frequencies, [row-1, col-1]
    transmission: np.ndarray  # (side, side) delivered-area frequencies per communication slot
    collision_rate: float
    attempt_rate: np.ndarray  # transmit attempts per sensor per communication slot
    phases: list[PhaseRecord] = field(default_factory=list)

    @property
    def summary(self) -> dict[str, float]:
        return nstep_stats(self.n_step)

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": METRICS_SCHEMA,
            "version": METRICS_VERSION,
            "strategy": self.strategy,
            "task": self.task,
            "test": {"summary": self.summary, "n_step": list(map(int, self.n_step)),
                     "collision_rate": self.collision_rate,
                     "attempt_rate": [float(x) for x in self.attempt_rate]},
            "phases": [p.to_json() for p in self.phases],
        }


def heatmap_text(matrix: np.ndarray) -> str:
    """CSV with the top map row first, so the text reads like the map."""
    rows = matrix[::-1]
    return "".join(",".join(f"{v:.8f}" for v in row) + "\n" for row in rows)


def read_heatmap(path: str | Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return data[::-1]


def render_heatmap(matrix: np.ndarray, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(matrix, origin="lower", cmap="viridis",
                   extent=(0.5, matrix.shape[1] + 0.5, 0.5, matrix.shape[0] + 0.5))
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def render_curves(phases: Sequence[PhaseRecord], path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.5))
    offset = 0
    for ph in phases:
        c = training_curve(ph.n_step)
        if c["episode"]:
            x = np.asarray(c["episode"]) + offset
            ax.plot(x, c["mean"], label=f"{ph.name} mean")
            ax.fill_between(x, c["p25"], c["p75"], alpha=0.25)
        offset += len(ph.n_step)
    ax.set_xlabel("training episode")
    ax.set_ylabel("N_step")
    ax.set_title(title)
    if phases:
        ax.legend(fontsize=6)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def render_boxplot(results: dict[str, Sequence[int]], path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(results)
    ax.boxplot([results[k] for k in names], whis=(5, 95), showfliers=False)
    ax.set_xticks(range(1, len(names) + 1), [k.upper() for k in names])
    ax.set_ylabel("N_step")
    ax.set_title(title)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def export_run(metrics: RunMetrics, out_dir: str | Path, *, checkpoints: dict[str, Any] | None = None,
               config_text: str | None = None, manifest: dict[str, Any] | None = None,
               episode_logs: Sequence[Any] = ()) -> list[Path]:
    """Write metrics, heatmaps (CSV + PNG), checkpoints, config snapshot, manifest and logs."""
    from .learner import save_checkpoint

    out = Path(out_dir)
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)

        def put(name: str, text: str) -> None:
            p = out / name
            p.write_text(text)
            written.append(p)

        put("metrics.json", json.dumps(metrics.to_json(), indent=1, sort_keys=True) + "\n")
        put("heatmap_location.csv", heatmap_text(metrics.location))
        put("heatmap_transmission.csv", heatmap_text(metrics.transmission))
        for name, mat in (("location", metrics.location), ("transmission", metrics.transmission)):
            p = out / f"heatmap_{name}.png"
            render_heatmap(mat, p, f"{metrics.strategy.upper()} {name}")
            written.append(p)
        if checkpoints:
            (out / "checkpoints").mkdir(exist_ok=True)
            for name, net in checkpoints.items():
                p = out / "checkpoints" / f"{name}.ckpt"
                save_checkpoint(p, net)
                written.append(p)
        if config_text is not None:
            put("config.yaml", config_text)
        if episode_logs:
            (out / "episodes").mkdir(exist_ok=True)
            for i, log in enumerate(episode_logs):
                put(f"episodes/episode_{i:05d}.jsonl", log.dumps())
        if manifest is not None:
            put("manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"export to {out} failed: {exc}") from exc
    return written
