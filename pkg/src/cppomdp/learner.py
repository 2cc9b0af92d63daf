"""Value networks, Double-DQN updates, replay, exploration and checkpoints."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .config import LearnerConfig

CKPT_MAGIC = "cppomdp-valuenet"
CKPT_VERSION = 1


class TrainingFault(RuntimeError):
    """Optimization produced non-finite values."""


def _conv_out(size: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - 3) // stride + 1


def _coverage(grid: int, strides, pads) -> tuple[int, set[int]]:
    """Output size and the set of input cells (1-D) reaching any output unit."""
    spans = [(i, i) for i in range(grid)]  # receptive interval of each unit
    for st, p in zip(strides, pads):
        out = _conv_out(len(spans), st, p)
        if out < 1:
            return 0, set()
        nxt = []
        for j in range(out):
            taps = [spans[i] for i in range(j * st - p, j * st - p + 3) if 0 <= i < len(spans)]
            nxt.append((min(a for a, _ in taps), max(b for _, b in taps)) if taps else (1, 0))
        spans = nxt
    seen = {x for a, b in spans for x in range(a, b + 1)}
    return len(spans), seen


def choose_padding(grid: int, strides=(1, 4, 4)) -> tuple[int, ...]:
    """Per-layer padding (0 or 1) ending at 1x1 with every cell inside the receptive field.

    Uniform padding 1 would end at 1x1 on 12x12 too, but the stride-4 layers
    would then never see rows/columns 8..12.  Falls back to ``(1,)*len`` (and a
    spatial mean) when no choice gives a full-coverage 1x1 output.
    """
    for pads in itertools.product((1, 0), repeat=len(strides)):
        size, seen = _coverage(grid, strides, pads)
        if size == 1 and len(seen) == grid:
            return pads
    return (1,) * len(strides)


class ValueNet(nn.Module):
    """Three 3x3 convolutions (strides 1, 4, 4) then a linear head.

    Padding is picked per grid size so the last convolution is 1x1 and sees
    the whole map: (1, 0, 0) on 12x12, (1, 0, 1) on 8x8.  Other sizes fall
    back to a spatial mean before the head.
    """

    def __init__(self, in_channels: int, n_actions: int, grid: int, width: int = 64, strides=(1, 4, 4),
                 padding=None):
        super().__init__()
        pads = tuple(padding) if padding is not None else choose_padding(grid, strides)
        self.spec = {"in_channels": in_channels, "n_actions": n_actions, "grid": grid,
                     "width": width, "strides": list(strides), "padding": list(pads)}
        layers: list[nn.Module] = []
        c, s = in_channels, grid
        for st, p in zip(strides, pads):
            layers += [nn.Conv2d(c, width, 3, stride=st, padding=p), nn.ReLU(inplace=True)]
            c, s = width, _conv_out(s, st, p)
        self.features = nn.Sequential(*layers)
        self.pooled = s != 1
        self.head = nn.Linear(width, n_actions)
        # NHWC convolutions are about twice as fast on CPU for these shapes
        self.to(memory_format=torch.channels_last)

    @property
    def n_actions(self) -> int:
        return self.head.out_features

    @property
    def in_channels(self) -> int:
        return self.spec["in_channels"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} observation channels, got {x.shape[-3]}")
        h = self.features(x.contiguous(memory_format=torch.channels_last))
        h = h.mean(dim=(-2, -1)) if self.pooled else h.flatten(1)
        return self.head(h)


def make_net(in_channels: int, n_actions: int, grid: int, seed: int | None = None, **kw) -> ValueNet:
    """Build a net with PyTorch's fan-in scaled uniform init under a private seed."""
    if seed is None:
        net = ValueNet(in_channels, n_actions, grid, **kw)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed) % 2**63)
            net = ValueNet(in_channels, n_actions, grid, **kw)
    net.init_seed = seed
    return net


@torch.no_grad()
def forward(net: ValueNet, obs) -> np.ndarray:
    """Action values for one observation (c, N, N) or a batch (B, c, N, N)."""
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(obs), dtype=dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = net(x).numpy()
    return out[0] if single else out


def double_q_target(online: ValueNet, target: ValueNet, rewards, next_obs, dones, gamma: float) -> torch.Tensor:
    """r + gamma * Q_target(o', argmax_a Q_online(o', a)); just r for terminal transitions."""
    rewards = torch.as_tensor(rewards)
    dones = torch.as_tensor(dones, dtype=torch.bool)
    with torch.no_grad():
        nxt = torch.as_tensor(next_obs, dtype=next(online.parameters()).dtype)
        best = online(nxt).argmax(dim=1, keepdim=True)
        boot = target(nxt).gather(1, best).squeeze(1)
    return torch.where(dones, rewards.to(boot.dtype), rewards.to(boot.dtype) + gamma * boot)


def td_step(net: ValueNet, target: ValueNet, batch, optimizer: torch.optim.Optimizer, gamma: float) -> float:
    """One gradient step on the mean squared TD error; returns the pre-update loss."""
    obs, actions, rewards, next_obs, dones = batch
    if len(actions) == 0:
        raise ValueError("empty batch")
    y = double_q_target(net, target, rewards, next_obs, dones, gamma)
    x = torch.as_tensor(obs, dtype=y.dtype)
    q = net(x).gather(1, torch.as_tensor(actions, dtype=torch.int64)[:, None]).squeeze(1)
    loss = torch.mean((q - y) ** 2)
    if not torch.isfinite(loss):
        raise TrainingFault(f"non-finite TD loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def tabular_q_update(table: np.ndarray, o, a: int, r: float, o_next, alpha: float, gamma: float,
                     done: bool = False) -> np.ndarray:
    """Q(o,a) <- alpha * (r + gamma * max_a' Q(o',a')) + (1 - alpha) * Q(o,a), in place."""
    boot = 0.0 if done else gamma * float(np.max(table[o_next]))
    table[o][a] = alpha * (r + boot) + (1 - alpha) * table[o][a]
    return table


def epsilon_for(episode: int, total: int, start: float = 0.9, end: float = 0.1) -> float:
    if total <= 0:
        return end
    frac = min(max(episode / total, 0.0), 1.0)
    return start + (end - start) * frac


def egreedy_action(values: np.ndarray, eps, rng: np.random.Generator):
    """Greedy (lowest index on ties) with probability 1 - eps, else uniform.

    ``values`` may be (A,) or (B, A); one uniform and one random action are
    drawn per row regardless of the outcome.
    """
    values = np.asarray(values)
    single = values.ndim == 1
    v = values[None] if single else values
    b, n = v.shape
    u = rng.random(b)
    rand = rng.integers(0, n, size=b)
    act = np.where(u < np.broadcast_to(eps, (b,)), rand, np.argmax(v, axis=1))
    return int(act[0]) if single else act


def grad_check(net: ValueNet, obs, action: int, h: float = 1e-5, per_tensor: int = 20,
               seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences of Q(obs)[action].

    Uses a float64 copy of ``net`` and a random subset of entries from every
    parameter tensor.  A difference quotient is only valid where no ReLU
    switches between ``theta - h`` and ``theta + h``; when one does, the step
    shrinks tenfold (three times at most) and the entry is skipped if the
    kink is still inside the interval.
    """
    import copy

    net64 = copy.deepcopy(net).double().to(memory_format=torch.contiguous_format)
    x = torch.as_tensor(np.asarray(obs), dtype=torch.float64)
    if x.ndim == 3:
        x = x[None]
    pattern: list[torch.Tensor] = []
    relus = [m for m in net64.modules() if isinstance(m, nn.ReLU)]
    hooks = [m.register_forward_hook(lambda _m, _i, out: pattern.append(out > 0)) for m in relus]

    def value() -> tuple[float, list[torch.Tensor]]:
        pattern.clear()
        v = net64(x)[0, action]
        return v, list(pattern)

    try:
        net64.zero_grad()
        out, base = value()
        out.backward()
        rng = np.random.default_rng(seed)
        worst = 0.0
        with torch.no_grad():
            for p in net64.parameters():
                flat = p.view(-1)
                grad = p.grad.view(-1)
                picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
                for i in picks:
                    orig = flat[i].item()
                    step = h
                    for _ in range(4):
                        flat[i] = orig + step
                        up, pu = value()
                        flat[i] = orig - step
                        down, pd = value()
                        flat[i] = orig
                        if all(torch.equal(a, b) and torch.equal(a, c) for a, b, c in zip(base, pu, pd)):
                            fd = (up.item() - down.item()) / (2 * step)
                            an = grad[i].item()
                            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
                            break
                        step /= 10
    finally:
        for hk in hooks:
            hk.remove()
    return worst


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with integer-coded observations."""

    def __init__(self, capacity: int, obs_shape: tuple[int, ...], dtype=np.uint8):
        self.capacity = capacity
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=dtype)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=bool)
        self.head = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, rewards, next_obs, dones) -> None:
        m = len(actions)
        if m == 0:
            return
        if not np.all(np.isfinite(rewards)):
            raise ValueError("non-finite reward")
        if m > self.capacity:
            sl = slice(m - self.capacity, m)
            obs, actions, rewards, next_obs, dones = (a[sl] for a in (obs, actions, rewards, next_obs, dones))
            m = self.capacity
        pos = (self.head + np.arange(m)) % self.capacity
        self.obs[pos] = obs
        self.next_obs[pos] = next_obs
        self.actions[pos] = actions
        self.rewards[pos] = rewards
        self.dones[pos] = dones
        self.head = (self.head + m) % self.capacity
        self.size = min(self.size + m, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        if self.size < batch:
            raise ValueError(f"buffer holds {self.size} < {batch} transitions")
        i = rng.integers(0, self.size, size=batch)
        return self.obs[i], self.actions[i], self.rewards[i], self.next_obs[i], self.dones[i]


@dataclass
class Agent:
    """A trainable value network with its target copy, optimizer and replay buffer."""

    net: ValueNet
    target: ValueNet
    optimizer: torch.optim.Optimizer
    buffer: ReplayBuffer
    sampler: np.random.Generator
    cfg: LearnerConfig
    sentinel: int
    updates: int = 0
    pending: float = 0.0
    losses: list | None = None
    train_every: int = 0

    @classmethod
    def create(cls, in_channels: int, n_actions: int, grid: int, cfg: LearnerConfig, sentinel: int,
               init_seed: int, sampler_seed, capacity: int | None = None,
               train_every: int | None = None) -> "Agent":
        net = make_net(in_channels, n_actions, grid, seed=init_seed)
        target = make_net(in_channels, n_actions, grid)
        target.load_state_dict(net.state_dict())
        for p in target.parameters():
            p.requires_grad_(False)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.zeta)
        from .core import code_dtype

        buf = ReplayBuffer(capacity or cfg.buffer_capacity, (in_channels, grid, grid), code_dtype(sentinel))
        return cls(net, target, opt, buf, np.random.default_rng(sampler_seed), cfg, sentinel, losses=[],
                   train_every=train_every or cfg.train_every)

    def store(self, obs, actions, rewards, next_obs, dones) -> None:
        self.buffer.add(obs, actions, rewards, next_obs, dones)
        self.pending += len(actions) / self.train_every

    def train(self) -> None:
        from .core import encode

        cfg = self.cfg
        while self.pending >= 1.0:
            self.pending -= 1.0
            if len(self.buffer) < max(cfg.batch_size, cfg.warmup):
                continue
            o, a, r, o2, d = self.buffer.sample(cfg.batch_size, self.sampler)
            loss = td_step(self.net, self.target,
                           (encode(o, self.sentinel), a, r, encode(o2, self.sentinel), d),
                           self.optimizer, cfg.gamma)
            self.losses.append(loss)
            self.updates += 1
            if self.updates % cfg.target_sync == 0:
                self.target.load_state_dict(self.net.state_dict())


# checkpoints --------------------------------------------------------------------

def param_layout(net: ValueNet) -> list[dict[str, Any]]:
    return [{"name": k, "shape": list(v.shape)} for k, v in net.state_dict().items()]


def save_checkpoint(path: str | Path, net: ValueNet, extra: dict[str, Any] | None = None) -> None:
    """Header line (JSON) followed by all parameters as little-endian float32, in state-dict order."""
    header = {
        "format": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "layer_spec": net.spec,
        "n_actions": net.n_actions,
        "params": param_layout(net),
        "rng_state": {"init_seed": getattr(net, "init_seed", None)},
        "extra": extra or {},
    }
    flat = np.concatenate([v.detach().cpu().numpy().astype("<f4").ravel() for v in net.state_dict().values()])
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(flat.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[ValueNet, dict[str, Any]]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut])
    if header.get("format") != CKPT_MAGIC or header.get("version") != CKPT_VERSION:
        raise ValueError(f"{path} is not a version-{CKPT_VERSION} checkpoint")
    spec = header["layer_spec"]
    net = ValueNet(spec["in_channels"], spec["n_actions"], spec["grid"], spec["width"], tuple(spec["strides"]),
                   tuple(spec["padding"]))
    flat = np.frombuffer(raw[cut + 1:], dtype="<f4")
    state, off = {}, 0
    for entry in header["params"]:
        size = int(np.prod(entry["shape"]))
        state[entry["name"]] = torch.from_numpy(flat[off:off + size].astype(np.float32).reshape(entry["shape"]))
        off += size
    if off != flat.size:
        raise ValueError(f"{path}: parameter payload size mismatch")
    net.load_state_dict(state)
    net.init_seed = header.get("rng_state", {}).get("init_seed")
    return net, header
