"""Scenario model, observation encoding and the lockstep episode driver.

Episodes run in *waves*: a batch of independent episodes stepped together so
that value networks are evaluated on whole batches.  Each episode owns its
random stream, so an episode's trajectory under deterministic policies does
not depend on which wave it runs in.

Per slot ``k`` the driver does: age tick; on communication slots advance the
walls/targets; local sensing; on communication slots sensor actions and
channel resolution; robot action and move; rewards.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .config import ConfigError, TaskConfig
from . import gridworld as gw
from .perception import SensorLayout, age_tick, build_layout, refresh, resolve_channel, robot_fov

NULL_ACTION = None
LOG_FORMAT = "cppomdp-episode-log"
LOG_VERSION = 1
SLOT_FIELDS = (
    "k", "pos", "action", "new_pos", "reward", "comm", "delivered", "collision",
    "transmitters", "belief_hash",
)


def is_comm_slot(k: int, k_p: int) -> bool:
    if k_p <= 0:
        raise ConfigError("K_p must be positive")
    if k < 0:
        raise ValueError("slot index must be non-negative")
    return k % k_p == 0


@dataclass(frozen=True)
class CpPomdpSpec:
    """The sensor/robot split of the scenario.

    Every slot is a movement slot; communication slots recur every ``K_p``
    slots.  Outside their slot class agents only have the null action.
    """

    task: TaskConfig
    layout: SensorLayout

    @property
    def sensors(self) -> range:
        return range(self.layout.count)

    @property
    def robots(self) -> range:
        return range(1)

    @property
    def centralized(self) -> bool:
        return not self.layout.distributed

    def is_comm(self, k: int) -> bool:
        return is_comm_slot(k, self.task.K_p)

    def is_move(self, k: int) -> bool:
        return True

    def sensor_actions(self, k: int) -> list:
        if not self.is_comm(k):
            return [NULL_ACTION]
        return list(range(self.layout.partition.count)) if self.centralized else [0, 1]

    def robot_actions(self, k: int) -> list:
        return list(range(len(gw.ACTIONS))) if self.is_move(k) else [NULL_ACTION]

    @property
    def sensor_outputs(self) -> int:
        return self.layout.partition.count if self.centralized else 2


def make_spec(cfg: TaskConfig, distributed: bool) -> CpPomdpSpec:
    if distributed:
        if cfg.num_buoys != cfg.num_areas:
            cfg = _replace_task(cfg, num_buoys=cfg.num_areas)
    elif cfg.num_buoys != 1:
        cfg = _replace_task(cfg, num_buoys=1)
    return CpPomdpSpec(cfg, build_layout(cfg))


def _replace_task(cfg: TaskConfig, **kw) -> TaskConfig:
    from dataclasses import replace

    return replace(cfg, **kw)


# observations ---------------------------------------------------------------

def code_dtype(sentinel: int):
    return np.uint8 if sentinel <= 255 else np.uint16


def _onehot(n: int, pos: np.ndarray) -> np.ndarray:
    pos = np.asarray(pos)
    lead = pos.shape[:-1]
    out = np.zeros(lead + (n, n), dtype=np.uint8)
    flat = out.reshape(-1, n, n)
    p = pos.reshape(-1, 2)
    flat[np.arange(flat.shape[0]), p[:, 1] - 1, p[:, 0] - 1] = 1
    return out


def robot_codes(belief, age, pos, goal, sentinel: int) -> np.ndarray:
    """Integer observation stack: belief code, age, robot one-hot, goal one-hot."""
    n = belief.shape[-1]
    dt = code_dtype(sentinel)
    return np.stack(
        [belief.astype(dt), np.minimum(age, sentinel).astype(dt), _onehot(n, pos).astype(dt), _onehot(n, goal).astype(dt)],
        axis=-3,
    )


def sensor_codes(robot_stack: np.ndarray, view: np.ndarray) -> np.ndarray:
    return np.concatenate([robot_stack, view[..., None, :, :].astype(robot_stack.dtype)], axis=-3)


def encode(codes: np.ndarray, sentinel: int) -> np.ndarray:
    """Map integer stacks to reals in [0, 1] (cell codes 0..3 become 0, 1/3, 2/3, 1)."""
    c = codes.shape[-3]
    scale = np.array([1 / 3, 1 / sentinel, 1.0, 1.0, 1 / 3][:c], dtype=np.float32)
    return codes.astype(np.float32) * scale[:, None, None]


def build_robot_observation(belief, age, pos, goal, sentinel: int) -> np.ndarray:
    return encode(robot_codes(belief, age, pos, goal, sentinel), sentinel)


def build_sensor_observation(belief, age, pos, goal, view, sentinel: int) -> np.ndarray:
    return encode(sensor_codes(robot_codes(belief, age, pos, goal, sentinel), view), sentinel)


# episode log ------------------------------------------------------------------

@dataclass
class EpisodeLog:
    slots: list[dict[str, Any]] = field(default_factory=list)
    cause: str = ""
    n_step: int = 0
    seed: Any = None

    def to_lines(self) -> list[str]:
        head = {"format": LOG_FORMAT, "version": LOG_VERSION, "fields": list(SLOT_FIELDS),
                "cause": self.cause, "n_step": self.n_step, "seed": self.seed}
        lines = [json.dumps(head, sort_keys=True)]
        for s in self.slots:
            lines.append(json.dumps([s[f] for f in SLOT_FIELDS]))
        return lines

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    @classmethod
    def loads(cls, text: str) -> "EpisodeLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        if head.get("format") != LOG_FORMAT or head.get("version") != LOG_VERSION:
            raise ValueError("not a version-1 episode log")
        names = head["fields"]
        slots = [dict(zip(names, json.loads(ln))) for ln in lines[1:]]
        return cls(slots, head["cause"], head["n_step"], head.get("seed"))


def belief_hash(belief: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(belief, dtype=np.int8).tobytes()).hexdigest()[:16]


# policies ---------------------------------------------------------------------

class RobotActor(Protocol):
    def __call__(self, obs: np.ndarray, idx: np.ndarray) -> np.ndarray: ...


class SensorActor(Protocol):
    """``kind`` is "oc", "centralized" (returns area indices) or "distributed" (returns bits)."""

    kind: str
    needs_obs: bool

    def act(self, env: "BatchEnv", idx: np.ndarray, obs: np.ndarray | None) -> np.ndarray | None: ...


@dataclass
class Hooks:
    robot: Callable[..., None] | None = None
    sensor: Callable[..., None] | None = None
    slot: Callable[[int], None] | None = None


@dataclass
class WaveStats:
    location: np.ndarray
    area_mass: np.ndarray
    attempts: np.ndarray
    comm_slots: int = 0
    collisions: int = 0
    slots: int = 0


# environment ------------------------------------------------------------------

class BatchEnv:
    """Ground truth, belief and age grids for a wave of episodes."""

    def __init__(self, spec: CpPomdpSpec, seeds: Sequence[Any]):
        cfg = spec.task
        self.spec = spec
        self.cfg = cfg
        self.n = n = cfg.map_size
        self.seeds = list(seeds)
        self.rngs = [np.random.default_rng(s) for s in self.seeds]
        eps = [gw.new_episode(cfg, r) for r in self.rngs]
        b = self.size = len(eps)
        self.pos = np.stack([e.robot.pos for e in eps]).astype(np.int64)
        self.goal = np.stack([e.robot.goal for e in eps]).astype(np.int64)
        self.debris = cfg.task == "debris"
        if self.debris:
            self.openings = np.stack([e.dynamic.openings for e in eps]).astype(np.int64)
        else:
            self.tpos = np.stack([e.dynamic.positions for e in eps]).astype(np.int64)
            self.active = np.stack([e.dynamic.active for e in eps])
        self.sentinel = cfg.age_sentinel
        self.belief = np.zeros((b, n, n), dtype=np.int8)
        self.age = np.full((b, n, n), self.sentinel, dtype=np.int16)
        self.done = np.zeros(b, dtype=bool)
        self.n_step = np.zeros(b, dtype=np.int64)
        self.cause = [""] * b
        self.collisions = np.zeros(b, dtype=np.int64)
        self.comm_slots = np.zeros(b, dtype=np.int64)
        self.k = 0
        self.materialize()

    # dynamics
    def materialize(self) -> None:
        if self.debris:
            self.cells = gw.materialize_walls(self.openings, self.pos, self.n)
        else:
            self.cells = gw.materialize_targets(self.tpos, self.active, self.n)

    def advance(self, idx: np.ndarray) -> None:
        n = self.n
        for i in idx:
            rng = self.rngs[i]
            if self.debris:
                self.openings[i] = gw._draw(n, self.openings[i], rng.random(3))
            else:
                moved = gw._draw(n, self.tpos[i], rng.random((2, 2)))
                self.tpos[i] = np.where(self.active[i][:, None], moved, self.tpos[i])
        if not self.debris:
            self.active = gw.visit(self.tpos, self.active, self.pos)

    def visited_all(self) -> np.ndarray:
        if self.debris:
            return np.ones(self.size, dtype=bool)
        return ~self.active.any(axis=1)

    def begin_slot(self, idx: np.ndarray, comm: bool) -> None:
        self.age[idx] = age_tick(self.age[idx], self.sentinel)
        if comm and self.k > 0:
            self.advance(idx)
        self.materialize()
        fov = robot_fov(self.n, self.pos[idx], self.cfg.v_robot)
        self.belief[idx], self.age[idx] = refresh(self.belief[idx], self.age[idx], self.cells[idx], fov)

    def deliver(self, idx: np.ndarray, mask: np.ndarray) -> None:
        self.belief[idx], self.age[idx] = refresh(self.belief[idx], self.age[idx], self.cells[idx], mask)

    def robot_codes(self, idx: np.ndarray) -> np.ndarray:
        return robot_codes(self.belief[idx], self.age[idx], self.pos[idx], self.goal[idx], self.sentinel)

    def sensor_codes(self, idx: np.ndarray, g: int | None = None) -> np.ndarray:
        """Sensor stacks; shape (len(idx), G, 5, N, N), or (len(idx), 5, N, N) for one sensor."""
        base = self.robot_codes(idx)
        cells = self.cells[idx]
        fov = self.spec.layout.fov
        if g is not None:
            return sensor_codes(base, np.where(fov[g], cells, gw.UNKNOWN))
        views = np.where(fov[None], cells[:, None], gw.UNKNOWN)
        base = np.broadcast_to(base[:, None], (base.shape[0], fov.shape[0]) + base.shape[1:])
        return sensor_codes(base, views)

    def chi(self, idx: np.ndarray, actions: np.ndarray) -> np.ndarray:
        if self.debris:
            return gw.chi_debris(self.cells[idx], self.pos[idx], actions, self.goal[idx], self.openings[idx])
        return gw.chi_muling(self.pos[idx], actions, self.goal[idx], self.tpos[idx], self.active[idx])

    def move(self, idx: np.ndarray, actions: np.ndarray):
        """Apply robot actions; returns (rewards, reached-goal flags)."""
        chi = self.chi(idx, actions)
        new_pos = gw.step_robot(self.cells[idx], self.pos[idx], actions)
        self.pos[idx] = new_pos
        if not self.debris:
            self.active[idx] = gw.visit(self.tpos[idx], self.active[idx], new_pos)
        rewards, reached = gw.robot_reward(
            self.cfg, new_pos, self.goal[idx], self.visited_all()[idx], chi
        )
        return np.asarray(rewards, dtype=np.float64), np.asarray(reached)


# driver ------------------------------------------------------------------------

def _area_mass(spec: CpPomdpSpec, kind: str, actions, success_mask=None) -> np.ndarray:
    c = spec.layout.partition.count
    if kind == "oc":
        return np.full(c, 1.0 / c)
    if kind == "centralized":
        return np.bincount(np.asarray(actions), minlength=c).astype(np.float64)
    return np.asarray(success_mask, dtype=np.float64)


def run_wave(
    spec: CpPomdpSpec,
    seeds: Sequence[Any],
    robot: RobotActor,
    sensors: SensorActor,
    hooks: Hooks | None = None,
    record: bool = False,
) -> tuple[BatchEnv, list[EpisodeLog] | None, WaveStats]:
    """Run one wave of episodes to completion."""
    hooks = hooks or Hooks()
    cfg = spec.task
    env = BatchEnv(spec, seeds)
    b, n, g_count = env.size, env.n, spec.layout.count
    c_count = spec.layout.partition.count
    kind = sensors.kind
    if kind == "distributed" and not spec.layout.distributed:
        raise ValueError("distributed sensor policy needs a distributed layout")
    if kind in ("centralized", "oc") and spec.layout.distributed:
        raise ValueError("centralized sensor policy needs a single-sensor layout")
    stats = WaveStats(np.zeros((n, n)), np.zeros(c_count), np.zeros(g_count))
    logs = [EpisodeLog(seed=_seed_repr(s)) for s in seeds] if record else None
    want_sensor = hooks.sensor is not None

    prev_obs = None
    prev_act = np.zeros(b, dtype=np.int64)
    prev_rew = np.zeros(b)
    has_prev = np.zeros(b, dtype=bool)
    # open sensor windows (started at the last comm slot) and the window closing this slot
    win_open = np.zeros(b, dtype=bool)
    win_obs = win_act = win_rew = win_hit = None
    close = None

    for k in range(cfg.steps_per_episode):
        env.k = k
        idx = np.flatnonzero(~env.done)
        if idx.size == 0:
            break
        comm = spec.is_comm(k)
        env.begin_slot(idx, comm)
        stats.location += np.bincount(
            (env.pos[idx, 1] - 1) * n + env.pos[idx, 0] - 1, minlength=n * n
        ).reshape(n, n)
        stats.slots += idx.size

        comm_rec: dict[int, tuple] = {}
        refresh_all = kind == "oc" and (comm or cfg.oc_every_slot)
        if refresh_all:
            env.deliver(idx, np.ones((idx.size, n, n), dtype=bool))
        if comm:
            s_obs = env.sensor_codes(idx) if (sensors.needs_obs or want_sensor) else None
            if s_obs is not None and kind != "distributed":
                s_obs = s_obs[:, 0]
            acts = sensors.act(env, idx, None if s_obs is None else s_obs)
            stats.comm_slots += idx.size
            env.comm_slots[idx] += 1
            if kind == "oc":
                stats.area_mass += idx.size / c_count
                acts_arr = np.zeros(idx.size, dtype=np.int64)
                hit = np.zeros((idx.size, 1), dtype=bool)
            elif kind == "centralized":
                acts_arr = np.asarray(acts, dtype=np.int64)
                env.deliver(idx, spec.layout.partition.masks[acts_arr])
                stats.area_mass += np.bincount(acts_arr, minlength=c_count)
                hit = np.zeros((idx.size, 1), dtype=bool)
            else:
                acts_arr = np.asarray(acts, dtype=np.int64)
                delivered, collision = resolve_channel(acts_arr, spec.layout.fov)
                env.deliver(idx, delivered)
                success = acts_arr.sum(axis=1) == 1
                stats.area_mass += (acts_arr * success[:, None]).sum(axis=0)
                stats.collisions += int(collision.sum())
                env.collisions[idx] += collision
                stats.attempts += acts_arr.sum(axis=0)
                hit = (acts_arr != 0) & collision[:, None]
            if record:
                for j, i in enumerate(idx):
                    if kind == "oc":
                        comm_rec[i] = ("oc", list(range(c_count)), False, [])
                    elif kind == "centralized":
                        comm_rec[i] = (int(acts_arr[j]), [int(acts_arr[j])], False, [])
                    else:
                        tx = [int(x) for x in np.flatnonzero(acts_arr[j])]
                        comm_rec[i] = (acts_arr[j].tolist(), tx if len(tx) == 1 else [],
                                       len(tx) >= 2, tx)
            if want_sensor:
                # the window opened at k - K_p now has its next observation
                if win_obs is not None and win_open[idx].any():
                    sel = idx[win_open[idx]]
                    close = (sel, win_obs[sel], win_act[sel], win_rew[sel].copy(), win_hit[sel],
                             s_obs[win_open[idx]])
                if win_obs is None:
                    win_obs = np.zeros((b,) + s_obs.shape[1:], dtype=s_obs.dtype)
                    win_act = np.zeros((b,) + acts_arr.shape[1:], dtype=np.int64)
                    win_rew = np.zeros(b)
                    win_hit = np.zeros((b,) + hit.shape[1:], dtype=bool)
                win_obs[idx] = s_obs
                win_act[idx] = acts_arr
                win_rew[idx] = 0.0
                win_hit[idx] = hit
                win_open[idx] = True

        obs = env.robot_codes(idx)
        if hooks.robot is not None and has_prev[idx].any():
            m = has_prev[idx]
            sel = idx[m]
            hooks.robot(prev_obs[sel], prev_act[sel], prev_rew[sel], obs[m], np.zeros(sel.size, dtype=bool))
        actions = np.asarray(robot(encode(obs, env.sentinel), idx), dtype=np.int64)
        if actions.shape != idx.shape or np.any((actions < 0) | (actions >= len(gw.ACTIONS))):
            raise ValueError("robot policy returned an action outside the movement set")
        old_pos = env.pos[idx].copy()
        belief_now = env.belief[idx].copy() if record else None
        rewards, reached = env.move(idx, actions)

        timeout = k == cfg.steps_per_episode - 1
        finished = reached | timeout
        if hooks.robot is not None:
            if prev_obs is None:
                prev_obs = np.zeros((b,) + obs.shape[1:], dtype=obs.dtype)
            prev_obs[idx] = obs
            prev_act[idx] = actions
            prev_rew[idx] = rewards
            has_prev[idx] = ~finished
            if finished.any():
                f = finished
                hooks.robot(obs[f], actions[f], rewards[f], obs[f], np.ones(int(f.sum()), dtype=bool))

        if want_sensor and win_obs is not None:
            win_rew[idx] += rewards
            if close is not None:
                sel, o, a, r, h, o2 = close
                # close[...] rows are aligned with idx order restricted to sel
                pos_in_idx = np.searchsorted(idx, sel)
                r = r + rewards[pos_in_idx]
                hooks.sensor(o, a, _sensor_r(r, h, cfg.eta), o2, np.zeros(sel.size, dtype=bool))
                close = None
            fin = idx[finished & win_open[idx]]
            if fin.size:
                hooks.sensor(win_obs[fin], win_act[fin], _sensor_r(win_rew[fin], win_hit[fin], cfg.eta),
                             win_obs[fin], np.ones(fin.size, dtype=bool))
                win_open[fin] = False

        if record:
            for j, i in enumerate(idx):
                cr = comm_rec.get(i)
                logs[i].slots.append({
                    "k": k,
                    "pos": old_pos[j].tolist(),
                    "action": int(actions[j]),
                    "new_pos": env.pos[i].tolist(),
                    "reward": float(rewards[j]),
                    "comm": None if cr is None else cr[0],
                    "delivered": None if cr is None else cr[1],
                    "collision": None if cr is None else cr[2],
                    "transmitters": None if cr is None else cr[3],
                    "belief_hash": belief_hash(belief_now[j]),
                })
        done_idx = idx[finished]
        env.done[done_idx] = True
        env.n_step[done_idx] = k + 1
        for j in np.flatnonzero(finished):
            env.cause[idx[j]] = "goal" if reached[j] else "timeout"
        if hooks.slot is not None:
            hooks.slot(idx.size)

    if record:
        for i, log in enumerate(logs):
            log.cause = env.cause[i]
            log.n_step = int(env.n_step[i])
    return env, logs, stats


def _sensor_r(window_sum: np.ndarray, hit: np.ndarray, eta: float) -> np.ndarray:
    """Per-sensor reward: -eta for transmitters in a collision, otherwise the window sum."""
    return np.where(hit, -eta, window_sum[:, None])


def _seed_repr(seed: Any) -> Any:
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}
    return seed


def run_episode(spec: CpPomdpSpec, robot: RobotActor, sensors: SensorActor, seed: Any,
                hooks: Hooks | None = None) -> EpisodeLog:
    """Run a single recorded episode."""
    _, logs, _ = run_wave(spec, [seed], robot, sensors, hooks=hooks, record=True)
    return logs[0]
