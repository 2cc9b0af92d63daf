"""True environment state, stochastic dynamics and robot rewards.

Coordinates are 1-indexed ``(column, row)`` pairs; row 1 is the bottom edge
where the robot starts and row N the top edge holding the goal.  Grids are
stored as ``cells[row - 1, col - 1]``.  Every array function accepts either a
single episode (``cells`` of shape ``(N, N)``, ``pos`` of shape ``(2,)``) or a
batch with one leading axis.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .config import ConfigError, TaskConfig

UNKNOWN, FREE, OBSTACLE, TARGET = 0, 1, 2, 3

# (d_col, d_row) per action index
ACTIONS = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)], dtype=np.int64)
UP = 2


def action_index(move: tuple[int, int]) -> int:
    for i, m in enumerate(ACTIONS):
        if tuple(m) == tuple(move):
            return i
    raise ValueError(f"{move} is not a unit grid move")


@dataclass(frozen=True)
class GridMap:
    cells: np.ndarray  # (N, N) int8
    task: str

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    def __getitem__(self, pos) -> int:
        col, row = pos
        return int(self.cells[row - 1, col - 1])


@dataclass(frozen=True)
class WallState:
    openings: np.ndarray  # (3,) opening columns z_j
    rows: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class TargetSet:
    positions: np.ndarray  # (2, 2) (col, row) pairs
    active: np.ndarray  # (2,) bool; False once visited

    @property
    def count(self) -> int:
        return int(self.active.sum())


@dataclass(frozen=True)
class RobotState:
    pos: np.ndarray  # (2,)
    goal: np.ndarray  # (2,)


@dataclass(frozen=True)
class Episode:
    grid: GridMap
    dynamic: WallState | TargetSet
    robot: RobotState


def wall_rows(n: int) -> tuple[tuple[int, int], ...]:
    return ((2, 3), (n // 2, n // 2 + 1), (n - 2, n - 1))


@lru_cache(maxsize=None)
def _drift_table(n: int) -> np.ndarray:
    """Row z_prev-1 holds P(z | z_prev) proportional to (n - |z - z_prev|)^2."""
    z = np.arange(1, n + 1)
    w = (n - np.abs(z[None, :] - z[:, None])).astype(np.float64) ** 2
    table = w / w.sum(axis=1, keepdims=True)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def _drift_cdf(n: int) -> np.ndarray:
    cdf = np.cumsum(_drift_table(n), axis=1)
    cdf[:, -1] = 1.0
    cdf.setflags(write=False)
    return cdf


def opening_pmf(n: int, z_prev: int) -> np.ndarray:
    """Distribution of the next opening column over ``1..n``."""
    return _drift_table(n)[z_prev - 1].copy()


def target_pmf(n: int, target: tuple[int, int]) -> np.ndarray:
    """Distribution of a target's next cell, indexed ``[row - 1, col - 1]``.

    Product of two independent per-coordinate drifts, each normalized over
    destinations around the current coordinate.
    """
    col, row = target
    t = _drift_table(n)
    return np.outer(t[row - 1], t[col - 1])


def _draw(n: int, prev: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = _drift_cdf(n)[np.asarray(prev) - 1]
    return (u[..., None] > cdf).sum(axis=-1) + 1


def new_episode(cfg: TaskConfig, rng: np.random.Generator) -> Episode:
    task = cfg.task
    if task not in ("debris", "muling"):
        raise ConfigError(f"unknown task {task!r}")
    n = cfg.map_size
    start = np.array([rng.integers(1, n + 1), 1])
    goal = np.array([rng.integers(1, n + 1), n])
    if task == "debris":
        dyn: WallState | TargetSet = WallState(rng.integers(1, n + 1, size=3), wall_rows(n))
    else:
        pos = np.zeros((2, 2), dtype=np.int64)
        for i in range(2):
            while True:
                cand = rng.integers(1, n + 1, size=2)
                if not np.array_equal(cand, start):
                    break
            pos[i] = cand
        active = np.arange(2) < cfg.n_targets
        dyn = TargetSet(pos, active)
    robot = RobotState(start, goal)
    return Episode(GridMap(materialize(task, n, dyn, start), task), dyn, robot)


def advance_walls(w: WallState, rng: np.random.Generator, n: int) -> WallState:
    """Redraw every opening; ``openings`` may carry extra leading axes."""
    return replace(w, openings=_draw(n, w.openings, rng.random(np.shape(w.openings))))


def advance_targets(t: TargetSet, rng: np.random.Generator, n: int) -> TargetSet:
    """Move every active target one drift step; visited targets stay put."""
    u = rng.random(np.shape(t.positions))
    moved = _draw(n, t.positions, u)
    positions = np.where(np.asarray(t.active)[..., None], moved, t.positions)
    return replace(t, positions=positions)


def materialize(task: str, n: int, dyn: WallState | TargetSet, robot_pos) -> np.ndarray:
    """Build the cell matrix of one episode.

    A wall cell occupied by the robot (an opening that drifted away while the
    robot stood in it) is reported free until the robot leaves it.
    """
    cells = np.full((n, n), FREE, dtype=np.int8)
    if task == "debris":
        for z, rows in zip(dyn.openings, dyn.rows):
            for r in rows:
                cells[r - 1, :] = OBSTACLE
                cells[r - 1, z - 1] = FREE
        col, row = robot_pos
        cells[row - 1, col - 1] = FREE
    else:
        for (col, row), on in zip(dyn.positions, dyn.active):
            if on:
                cells[row - 1, col - 1] = TARGET
    return cells


def materialize_walls(openings: np.ndarray, pos: np.ndarray, n: int) -> np.ndarray:
    """Batched debris cells from ``openings`` (B, 3) and robot positions (B, 2)."""
    b = openings.shape[0]
    cells = np.full((b, n, n), FREE, dtype=np.int8)
    idx = np.arange(b)
    for j, rows in enumerate(wall_rows(n)):
        for r in rows:
            cells[:, r - 1, :] = OBSTACLE
            cells[idx, r - 1, openings[:, j] - 1] = FREE
    cells[idx, pos[:, 1] - 1, pos[:, 0] - 1] = FREE
    return cells


def materialize_targets(positions: np.ndarray, active: np.ndarray, n: int) -> np.ndarray:
    """Batched muling cells from ``positions`` (B, 2, 2) and ``active`` (B, 2)."""
    b = positions.shape[0]
    cells = np.full((b, n, n), FREE, dtype=np.int8)
    bi, ti = np.nonzero(active)
    cells[bi, positions[bi, ti, 1] - 1, positions[bi, ti, 0] - 1] = TARGET
    return cells


def _batched(cells, pos, action):
    cells = np.asarray(cells)
    pos = np.asarray(pos, dtype=np.int64)
    action = np.asarray(action, dtype=np.int64)
    single = cells.ndim == 2
    if single:
        cells, pos, action = cells[None], pos[None], action[None]
    return single, cells, pos, action


def cell_at(cells: np.ndarray, pos: np.ndarray, fill: int = OBSTACLE) -> np.ndarray:
    """Look up batched cells at batched positions; off-map positions read ``fill``."""
    n = cells.shape[-1]
    inside = np.all((pos >= 1) & (pos <= n), axis=-1)
    c = np.clip(pos[..., 0], 1, n) - 1
    r = np.clip(pos[..., 1], 1, n) - 1
    vals = cells[np.arange(cells.shape[0]), r, c]
    return np.where(inside, vals, fill)


def step_robot(cells, pos, action):
    """Apply a move; off-map and obstacle destinations leave the robot in place."""
    single, cells, pos, action = _batched(cells, pos, action)
    dest = pos + ACTIONS[action]
    blocked = cell_at(cells, dest) == OBSTACLE
    out = np.where(blocked[:, None], pos, dest)
    return out[0] if single else out


def _dist(a, b):
    return np.sqrt(((np.asarray(a) - np.asarray(b)) ** 2).sum(axis=-1))


def chi_debris(cells, pos, action, goal, openings):
    """Intermediate-progress indicator for the debris task (pre-move state)."""
    single, cells, pos, action = _batched(cells, pos, action)
    goal = np.asarray(goal).reshape(-1, 2)
    openings = np.asarray(openings).reshape(-1, 3)
    n = cells.shape[-1]
    move = ACTIONS[action]
    dest = pos + move
    up_free = (action == UP) & (cell_at(cells, dest) == FREE)
    toward_gap = np.zeros_like(up_free)
    for j, rows in enumerate(wall_rows(n)):
        below = np.isin(pos[:, 1] + 1, rows)
        z = openings[:, j]
        toward_gap |= below & (np.abs(dest[:, 0] - z) < np.abs(pos[:, 0] - z))
    top = (pos[:, 1] == n) & (_dist(dest, goal) < _dist(pos, goal))
    out = (up_free | toward_gap | top).astype(np.int64)
    return int(out[0]) if single else out


def chi_muling(pos, action, goal, targets, active):
    """Intermediate-progress indicator for the data-muling task (pre-move state).

    With two active targets the robot is rewarded for approaching the target
    that starts the shorter tour robot -> t_i -> t_other -> goal (lower index
    on ties).
    """
    pos = np.asarray(pos, dtype=np.int64)
    single = pos.ndim == 1
    if single:
        pos = pos[None]
        action = np.asarray(action)[None]
        goal = np.asarray(goal)[None]
        targets = np.asarray(targets)[None]
        active = np.asarray(active)[None]
    else:
        action, goal, targets, active = map(np.asarray, (action, goal, targets, active))
    dest = pos + ACTIONS[action]
    count = active.sum(axis=1)
    d_now = _dist(pos[:, None, :], targets)  # (B, 2)
    d_next = _dist(dest[:, None, :], targets)
    closer = d_next < d_now

    leg = _dist(targets[:, 0], targets[:, 1])
    tour0 = d_now[:, 0] + leg + _dist(targets[:, 1], goal)
    tour1 = d_now[:, 1] + leg + _dist(targets[:, 0], goal)
    first = np.where(tour1 < tour0, 1, 0)
    rows = np.arange(pos.shape[0])
    c1 = (count == 2) & closer[rows, first]
    remaining = np.argmax(active, axis=1)
    c2 = (count == 1) & closer[rows, remaining]
    c3 = (count == 0) & (_dist(dest, goal) < _dist(pos, goal))
    out = (c1 | c2 | c3).astype(np.int64)
    return int(out[0]) if single else out


def sigma_at(cfg: TaskConfig, row):
    if not cfg.sigma_ramp:
        return cfg.sigma
    return cfg.sigma * (1.0 + (np.asarray(row) - 1) / (cfg.map_size - 1))


def robot_reward(cfg: TaskConfig, new_pos, goal, all_visited, chi, row=None):
    """rho on task completion, sigma when the progress indicator fires, else 0."""
    at_goal = np.all(np.asarray(new_pos) == np.asarray(goal), axis=-1) & np.asarray(all_visited)
    sigma = sigma_at(cfg, row if row is not None else np.asarray(new_pos)[..., 1])
    r = np.where(at_goal, cfg.rho, np.where(np.asarray(chi) == 1, sigma, 0.0))
    if r.ndim == 0:
        return float(r), bool(at_goal)
    return r, at_goal


def visit(positions, active, robot_pos):
    """Deactivate every active target that shares the robot's cell."""
    positions = np.asarray(positions)
    hit = np.all(positions == np.asarray(robot_pos)[..., None, :], axis=-1) & active
    return active & ~hit
