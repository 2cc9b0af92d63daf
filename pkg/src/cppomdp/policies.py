"""Communication benchmarks and greedy/epsilon-greedy wrappers around value nets."""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .learner import ValueNet, egreedy_action, forward
from .perception import Partition


class StrategyKind(str, enum.Enum):
    RC = "rc"
    CC = "cc"
    OC = "oc"
    CJCC = "cjcc"
    DJCC = "djcc"

    @property
    def learned_sensors(self) -> bool:
        return self in (StrategyKind.CJCC, StrategyKind.DJCC)

    @property
    def distributed(self) -> bool:
        return self is StrategyKind.DJCC


def rc_policy(rng: np.random.Generator, c: int) -> int:
    return int(rng.integers(0, c))


def cc_policy(pos, partition: Partition):
    """Area whose center is closest (Euclidean) to the robot; lowest index on ties."""
    pos = np.asarray(pos, dtype=np.float64)
    d = ((pos[..., None, :] - partition.centers) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1)


def oc_policy(belief, age, cells):
    """Full-map delivery: belief becomes the truth and every age resets."""
    return np.array(cells, dtype=belief.dtype), np.zeros_like(age)


def greedy_policy(net: ValueNet):
    def act(obs):
        return np.argmax(forward(net, obs), axis=-1)

    return act


# robot actors -------------------------------------------------------------------

class NetRobot:
    """Robot actor backed by a value net; ``eps`` is indexed by env slot."""

    def __init__(self, net: ValueNet, eps=None, rng: np.random.Generator | None = None):
        self.net = net
        self.eps = eps
        self.rng = rng

    def __call__(self, obs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        q = forward(self.net, obs)
        if self.eps is None:
            return np.argmax(q, axis=1)
        return egreedy_action(q, np.asarray(self.eps)[idx], self.rng)


class ScriptedRobot:
    """Robot actor from a plain function of the environment (test and oracle use)."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, obs, idx):
        return np.asarray(self.fn(obs, idx), dtype=np.int64)


# sensor actors ------------------------------------------------------------------

class OracleComm:
    kind = "oc"
    needs_obs = False

    def act(self, env, idx, obs):
        return None


class RandomComm:
    kind = "centralized"
    needs_obs = False

    def act(self, env, idx, obs):
        c = env.spec.layout.partition.count
        return np.array([rc_policy(env.rngs[i], c) for i in idx], dtype=np.int64)


class ClosestComm:
    kind = "centralized"
    needs_obs = False

    def act(self, env, idx, obs):
        return cc_policy(env.pos[idx], env.spec.layout.partition)


class ClosestDistributedComm:
    """The sensor owning the closest block transmits alone."""

    kind = "distributed"
    needs_obs = False

    def act(self, env, idx, obs):
        g = env.spec.layout.count
        who = cc_policy(env.pos[idx], env.spec.layout.partition)
        return np.eye(g, dtype=np.int64)[who]


class RandomDistributedComm:
    """A uniformly chosen sensor transmits alone."""

    kind = "distributed"
    needs_obs = False

    def act(self, env, idx, obs):
        g = env.spec.layout.count
        who = np.array([rc_policy(env.rngs[i], g) for i in idx], dtype=np.int64)
        return np.eye(g, dtype=np.int64)[who]


class LearnedCentralComm:
    kind = "centralized"
    needs_obs = True

    def __init__(self, net: ValueNet, eps=None, rng=None):
        self.net, self.eps, self.rng = net, eps, rng

    def act(self, env, idx, obs):
        from .core import encode

        q = forward(self.net, encode(obs, env.sentinel))
        if self.eps is None:
            return np.argmax(q, axis=1)
        return egreedy_action(q, np.asarray(self.eps)[idx], self.rng)


class LearnedDistributedComm:
    kind = "distributed"
    needs_obs = True

    def __init__(self, nets: Sequence[ValueNet], eps=None, rng=None):
        self.nets, self.eps, self.rng = list(nets), eps, rng

    def act(self, env, idx, obs):
        from .core import encode

        out = np.zeros((idx.size, len(self.nets)), dtype=np.int64)
        for g, net in enumerate(self.nets):
            q = forward(net, encode(obs[:, g], env.sentinel))
            if self.eps is None:
                out[:, g] = np.argmax(q, axis=1)
            else:
                out[:, g] = egreedy_action(q, np.asarray(self.eps)[idx], self.rng)
        return out


def fixed_sensor_actor(name: str, distributed: bool = False):
    name = StrategyKind(name)
    if distributed:
        if name is StrategyKind.CC:
            return ClosestDistributedComm()
        if name is StrategyKind.RC:
            return RandomDistributedComm()
        raise ValueError(f"{name.value} has no distributed fixed form")
    if name is StrategyKind.RC:
        return RandomComm()
    if name is StrategyKind.CC:
        return ClosestComm()
    if name is StrategyKind.OC:
        return OracleComm()
    raise ValueError(f"{name.value} has learned sensors")
