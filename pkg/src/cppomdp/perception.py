"""Robot belief and age-of-information grids, local sensing and the two channels.

Area and sensor indices are 0-based here; area 0 is the bottom-left block and
blocks are numbered row-major from the bottom row.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import ConfigError, TaskConfig
from .gridworld import UNKNOWN


@dataclass(frozen=True)
class Partition:
    masks: np.ndarray  # (C, N, N) bool
    centers: np.ndarray  # (C, 2) (col, row) block centers
    side: int  # block side length

    @property
    def count(self) -> int:
        return self.masks.shape[0]


@dataclass(frozen=True)
class SensorLayout:
    fov: np.ndarray  # (G, N, N) bool
    anchors: np.ndarray  # (G, 2)
    partition: Partition

    @property
    def count(self) -> int:
        return self.fov.shape[0]

    @property
    def distributed(self) -> bool:
        return self.count > 1


@dataclass(frozen=True)
class CommOutcome:
    delivered: np.ndarray  # (N, N) bool, cells refreshed this slot
    collision: bool
    transmitters: tuple[int, ...]


def partition_map(n: int, c: int) -> Partition:
    side = round(c**0.5)
    if side * side != c or n % side:
        raise ConfigError(f"cannot tile a {n}x{n} map into {c} square areas")
    b = n // side
    masks = np.zeros((c, n, n), dtype=bool)
    centers = np.zeros((c, 2))
    for i in range(c):
        br, bc = divmod(i, side)
        masks[i, br * b:(br + 1) * b, bc * b:(bc + 1) * b] = True
        centers[i] = (bc * b + (b + 1) / 2, br * b + (b + 1) / 2)
    return Partition(masks, centers, b)


def disk(n: int, center, radius: float) -> np.ndarray:
    cols = np.arange(1, n + 1)
    dc = cols[None, :] - center[0]
    dr = cols[:, None] - center[1]
    return dc**2 + dr**2 <= radius**2 + 1e-9


@lru_cache(maxsize=None)
def _disk_table(n: int, radius: float) -> np.ndarray:
    """Field-of-view masks for every robot cell, indexed ``[row - 1, col - 1]``."""
    table = np.zeros((n, n, n, n), dtype=bool)
    for r in range(1, n + 1):
        for c in range(1, n + 1):
            table[r - 1, c - 1] = disk(n, (c, r), radius)
    table.setflags(write=False)
    return table


def robot_fov(n: int, pos, radius: float) -> np.ndarray:
    pos = np.asarray(pos)
    return _disk_table(n, float(radius))[pos[..., 1] - 1, pos[..., 0] - 1]


def build_layout(cfg: TaskConfig) -> SensorLayout:
    n = cfg.map_size
    part = partition_map(n, cfg.num_areas)
    if cfg.num_buoys == 1:
        return SensorLayout(np.ones((1, n, n), dtype=bool), np.array([[(n + 1) / 2, (n + 1) / 2]]), part)
    if cfg.fov_mode == "block":
        fov = part.masks.copy()
    else:
        fov = np.stack([disk(n, c, cfg.sensor_radius) for c in part.centers])
    return SensorLayout(fov, part.centers.copy(), part)


def age_tick(age: np.ndarray, sentinel: int) -> np.ndarray:
    """Advance every observed cell's age by one slot; never-seen cells keep the sentinel."""
    return np.where(age >= sentinel, sentinel, np.minimum(age + 1, sentinel)).astype(age.dtype)


def refresh(belief, age, cells, mask):
    return np.where(mask, cells, belief).astype(belief.dtype), np.where(mask, 0, age).astype(age.dtype)


def sense_local(belief, age, cells, pos, radius: float):
    n = cells.shape[-1]
    return refresh(belief, age, cells, robot_fov(n, pos, radius))


def apply_centralized_tx(belief, age, cells, area: int, partition: Partition):
    if not 0 <= area < partition.count:
        raise ValueError(f"area index {area} outside 0..{partition.count - 1}")
    return refresh(belief, age, cells, partition.masks[area])


def resolve_channel(actions, fov: np.ndarray):
    """Collision channel: returns (delivered mask, collision flag, transmitters).

    Works on one action vector ``(G,)`` or a batch ``(B, G)``.
    """
    actions = np.asarray(actions)
    if np.any((actions != 0) & (actions != 1)):
        raise ValueError("distributed sensor actions must be 0 or 1")
    count = actions.sum(axis=-1)
    success = count == 1
    who = np.argmax(actions, axis=-1)
    delivered = fov[who] & np.asarray(success)[..., None, None]
    return delivered, count >= 2


def apply_distributed_tx(belief, age, cells, actions, fov: np.ndarray):
    actions = np.asarray(actions)
    if actions.shape[-1] != fov.shape[0]:
        raise ValueError(f"expected {fov.shape[0]} sensor actions, got {actions.shape[-1]}")
    delivered, collision = resolve_channel(actions, fov)
    belief, age = refresh(belief, age, cells, delivered)
    outcome = CommOutcome(delivered, bool(collision), tuple(int(g) for g in np.flatnonzero(actions)))
    return belief, age, outcome


def sensor_view(cells, fov_mask):
    return np.where(fov_mask, cells, UNKNOWN).astype(np.int8)


def sensor_reward(actions, window, eta: float, k_p: int, centralized: bool = False) -> np.ndarray:
    """Per-sensor reward for one communication slot.

    ``window`` holds the robot rewards of slots k..k+K_p (zero-padded if the
    episode ended early).  Transmitters involved in a collision get ``-eta``.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (k_p + 1,):
        raise ValueError(f"reward window must have {k_p + 1} entries, got {window.shape}")
    total = window.sum()
    actions = np.atleast_1d(np.asarray(actions))
    if centralized:
        return np.full(actions.shape, total)
    collided = (actions != 0) & (actions.sum() >= 2)
    return np.where(collided, -eta, total)
