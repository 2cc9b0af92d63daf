"""Networked-control baselines, iterative joint training and evaluation.

Seeding rule: the master seed ``s`` spawns ``SeedSequence(s, spawn_key=key)``
children with

* ``(0, phase, episode)`` environment stream of one episode,
* ``(1, phase)`` exploration stream of a training phase,
* ``(2, phase, agent)`` network initialization,
* ``(3, phase, agent)`` replay sampler.

Test episodes use phase id ``TEST_PHASE``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from . import __version__
from .config import RunConfig, dump_config
from .core import CpPomdpSpec, Hooks, make_spec, run_wave
from .learner import Agent, ValueNet, epsilon_for
from .metrics import PhaseRecord, RunMetrics, export_run, normalize, render_curves
from .policies import (
    LearnedCentralComm,
    LearnedDistributedComm,
    NetRobot,
    StrategyKind,
    fixed_sensor_actor,
)

log = logging.getLogger(__name__)

ENV, EXPLORE, INIT, SAMPLER = 0, 1, 2, 3
TEST_PHASE = 10_000


def episode_seed(master: int, phase: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(ENV, phase, episode))


def stream(master: int, kind: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(kind,) + tuple(key))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class SensorSide:
    """What the sensors do: a fixed benchmark, or learned nets."""

    fixed: str | None = None
    nets: list[ValueNet] = field(default_factory=list)
    distributed: bool = False

    def actor(self, eps=None, rng=None):
        if self.fixed is not None:
            return fixed_sensor_actor(self.fixed, self.distributed)
        if self.distributed:
            return LearnedDistributedComm(self.nets, eps, rng)
        return LearnedCentralComm(self.nets[0], eps, rng)


@dataclass
class TrainResult:
    robot: ValueNet
    sensors: SensorSide
    phases: list[PhaseRecord]
    spec: CpPomdpSpec
    seconds: float = 0.0


def _configure_torch() -> None:
    torch.set_num_threads(1)


class Trainer:
    def __init__(self, cfg: RunConfig, progress: Callable[[str], None] | None = None):
        _configure_torch()
        self.cfg = cfg
        self.progress = progress or (lambda msg: log.info(msg))

    def _agent(self, spec: CpPomdpSpec, phase: int, agent_id: int, channels: int, n_actions: int,
               capacity: int | None = None, train_every: int | None = None) -> Agent:
        t = spec.task
        return Agent.create(
            channels, n_actions, t.map_size, self.cfg.learner, t.age_sentinel,
            init_seed=_int_seed(stream(self.cfg.seed, INIT, phase, agent_id)),
            sampler_seed=stream(self.cfg.seed, SAMPLER, phase, agent_id),
            capacity=capacity,
            train_every=train_every,
        )

    def run_phase(self, spec: CpPomdpSpec, phase: int, name: str, n_episodes: int, trainee: str,
                  robot: Agent | ValueNet, sensors: SensorSide, sensor_agents: list[Agent] | None = None
                  ) -> PhaseRecord:
        """Train one side for ``n_episodes`` while the other side stays frozen."""
        rec = PhaseRecord(name, trainee, phase)
        explore = np.random.default_rng(stream(self.cfg.seed, EXPLORE, phase))
        w = self.cfg.wave_size
        robot_net = robot.net if isinstance(robot, Agent) else robot
        t0 = time.perf_counter()
        for start in range(0, n_episodes, w):
            ep = np.arange(start, min(start + w, n_episodes))
            eps = np.array([epsilon_for(e, n_episodes, self.cfg.learner.eps_start, self.cfg.learner.eps_end)
                            for e in ep])
            seeds = [episode_seed(self.cfg.seed, phase, int(e)) for e in ep]
            hooks = Hooks()
            if trainee == "robot":
                agent = robot
                robot_actor = NetRobot(robot_net, eps, explore)
                sensor_actor = sensors.actor()
                hooks.robot = agent.store
                hooks.slot = lambda _n: agent.train()
            else:
                robot_actor = NetRobot(robot_net)
                sensor_actor = sensors.actor(eps, explore)
                agents = sensor_agents
                if sensors.distributed:
                    def store(o, a, r, o2, d):
                        for g, ag in enumerate(agents):
                            ag.store(o[:, g], a[:, g], r[:, g], o2[:, g], d)
                else:
                    def store(o, a, r, o2, d):
                        agents[0].store(o, a, r[:, 0], o2, d)

                def train(_n):
                    for ag in agents:
                        ag.train()

                hooks.sensor = store
                hooks.slot = train
            env, _, _ = run_wave(spec, seeds, robot_actor, sensor_actor, hooks)
            rec.n_step.extend(int(x) for x in env.n_step)
            rec.collisions.extend(int(x) for x in env.collisions)
            rec.comm_slots.extend(int(x) for x in env.comm_slots)
            done = len(rec.n_step)
            if done % max(w, (n_episodes // 20) // w * w or w) == 0 or done == n_episodes:
                recent = rec.n_step[-max(w, n_episodes // 20):]
                self.progress(f"{name}: {done}/{n_episodes} episodes, recent mean N_step "
                              f"{np.mean(recent):.1f}, {time.perf_counter() - t0:.0f}s")
        if trainee == "robot":
            rec.updates = robot.updates
        else:
            rec.updates = sum(a.updates for a in sensor_agents)
        return rec

    # NC baselines --------------------------------------------------------------
    def train_nc(self, strategy: str, episodes: int | None = None) -> TrainResult:
        kind = StrategyKind(strategy)
        if kind.learned_sensors:
            raise ValueError(f"{strategy} is a joint strategy; use train_jcc")
        t0 = time.perf_counter()
        spec = make_spec(self.cfg.task, distributed=False)
        n = self.cfg.schedule.n_train_robot if episodes is None else episodes
        agent = self._agent(spec, 0, 0, 4, 4)
        sensors = SensorSide(fixed=kind.value)
        rec = self.run_phase(spec, 0, f"{kind.value}-robot", n, "robot", agent, sensors)
        return TrainResult(agent.net, sensors, [rec], spec, time.perf_counter() - t0)

    # joint training --------------------------------------------------------------
    def train_jcc(self, mode: str, initial_robot: ValueNet | None = None) -> TrainResult:
        """Alternate robot and sensor phases, then a final robot phase.

        ``initial_robot`` stands in for the first robot phase (which trains
        against the initial fixed sensor strategy) when that network already
        exists, e.g. from the matching NC baseline.
        """
        kind = StrategyKind(mode)
        if not kind.learned_sensors:
            raise ValueError(f"{mode} is not a joint strategy")
        sched = self.cfg.schedule
        t0 = time.perf_counter()
        spec = make_spec(self.cfg.task, distributed=kind.distributed)
        g_count = spec.layout.count
        n_out = spec.sensor_outputs
        sensors = SensorSide(fixed=sched.initial_sensor_strategy, distributed=kind.distributed)
        phases: list[PhaseRecord] = []
        robot_agent: Agent | None = None
        sensor_agents: list[Agent] | None = None
        robot_net: ValueNet | None = None
        phase = 0
        for r in range(sched.n_round + 1):
            # robot phase
            if r == 0 and initial_robot is not None:
                robot_net = initial_robot
                phases.append(PhaseRecord(f"{kind.value}-robot-{r}", "robot", phase, skipped=True))
            else:
                if robot_agent is None or sched.reset_each_phase:
                    robot_agent = self._agent(spec, phase, 0, 4, 4)
                elif robot_agent is not None:
                    robot_agent.pending = 0.0
                rec = self.run_phase(spec, phase, f"{kind.value}-robot-{r}", sched.n_train_robot, "robot",
                                     robot_agent, sensors)
                phases.append(rec)
                robot_net = robot_agent.net
            phase += 1
            if r == sched.n_round:
                break
            # sensor phase
            if sensor_agents is None or sched.reset_each_phase:
                cap = self.cfg.learner.sensor_buffer_capacity
                every = self.cfg.learner.sensor_train_every or None
                sensor_agents = [self._agent(spec, phase, g + 1, 5, n_out, capacity=cap, train_every=every)
                                 for g in range(g_count)]
            sensors = SensorSide(nets=[a.net for a in sensor_agents], distributed=kind.distributed)
            rec = self.run_phase(spec, phase, f"{kind.value}-sensor-{r}", sched.n_train_sensor, "sensor",
                                 robot_net, sensors, sensor_agents)
            phases.append(rec)
            phase += 1
        return TrainResult(robot_net, sensors, phases, spec, time.perf_counter() - t0)

    def train(self, strategy: str, initial_robot: ValueNet | None = None) -> TrainResult:
        if StrategyKind(strategy).learned_sensors:
            return self.train_jcc(strategy, initial_robot=initial_robot)
        return self.train_nc(strategy)


def resolve_spec(cfg: RunConfig, strategy: str) -> CpPomdpSpec:
    return make_spec(cfg.task, distributed=StrategyKind(strategy).distributed)


def evaluate(cfg: RunConfig, strategy: str, robot: ValueNet, sensors: SensorSide, n_test: int | None = None,
             record: int = 0) -> tuple[RunMetrics, list]:
    """Greedy test episodes with fixed per-episode seeds; returns metrics and the first ``record`` logs."""
    _configure_torch()
    spec = resolve_spec(cfg, strategy)
    n = cfg.schedule.n_test if n_test is None else n_test
    w = cfg.wave_size
    nn_ = spec.task.map_size
    c = spec.layout.partition.count
    location = np.zeros((nn_, nn_))
    area = np.zeros(c)
    attempts = np.zeros(spec.layout.count)
    comm = collisions = 0
    n_steps: list[int] = []
    logs: list = []
    robot_actor = NetRobot(robot)
    sensor_actor = sensors.actor()
    for start in range(0, n, w):
        ep = range(start, min(start + w, n))
        seeds = [episode_seed(cfg.seed, TEST_PHASE, e) for e in ep]
        want = start < record
        env, wave_logs, st = run_wave(spec, seeds, robot_actor, sensor_actor, record=want)
        if want:
            logs.extend(wave_logs[: record - start])
        n_steps.extend(int(x) for x in env.n_step)
        location += st.location
        area += st.area_mass
        attempts += st.attempts
        comm += st.comm_slots
        collisions += st.collisions
    s = round(c**0.5)
    metrics = RunMetrics(
        strategy=strategy,
        task=spec.task.task,
        n_step=n_steps,
        location=normalize(location),
        transmission=(area / comm if comm else area).reshape(s, s),
        collision_rate=collisions / comm if comm else 0.0,
        attempt_rate=attempts / comm if comm else attempts,
    )
    return metrics, logs


def replay_wave(cfg: RunConfig, strategy: str, robot: ValueNet, sensors: SensorSide, episode: int,
                n_test: int):
    """Re-run the test wave containing ``episode`` and return that episode's log."""
    _configure_torch()
    if not 0 <= episode < n_test:
        raise ValueError(f"episode {episode} outside the {n_test} test episodes")
    spec = resolve_spec(cfg, strategy)
    w = cfg.wave_size
    start = episode // w * w
    stop = min(start + w, n_test)
    seeds = [episode_seed(cfg.seed, TEST_PHASE, e) for e in range(start, stop)]
    _, logs, _ = run_wave(spec, seeds, NetRobot(robot), sensors.actor(), record=True)
    return logs[episode - start]


# run directories --------------------------------------------------------------

def run_manifest(cfg: RunConfig, strategy: str, phases: Sequence[PhaseRecord], seconds: float,
                 checkpoints: Sequence[str]) -> dict[str, Any]:
    return {
        "version": __version__,
        "seed": cfg.seed,
        "strategy": strategy,
        "task": cfg.task.task,
        "n_test": cfg.schedule.n_test,
        "wave_size": cfg.wave_size,
        "seed_rule": "SeedSequence(seed, spawn_key=(stream, phase, ...)); test phase 10000",
        "phases": [{"name": p.name, "phase_id": p.phase_id, "episodes": len(p.n_step), "skipped": p.skipped}
                   for p in phases],
        "checkpoints": list(checkpoints),
        "train_seconds": round(seconds, 3),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def named_nets(robot, sensors: SensorSide) -> dict[str, Any]:
    nets = {"robot": robot}
    for g, net in enumerate(sensors.nets):
        nets[f"sensor_{g}"] = net
    return nets


def write_run(cfg: RunConfig, strategy: str, result: TrainResult, out: str | Path) -> RunMetrics:
    """Evaluate a training result and export it as a run directory."""
    metrics, logs = evaluate(cfg, strategy, result.robot, result.sensors, record=cfg.log_episodes)
    metrics.phases = result.phases
    nets = named_nets(result.robot, result.sensors)
    export_run(metrics, out, checkpoints=nets, config_text=dump_config(cfg),
               manifest=run_manifest(cfg, strategy, result.phases, result.seconds, sorted(nets)),
               episode_logs=logs)
    render_curves(result.phases, Path(out) / "training_curves.png", strategy.upper())
    return metrics
