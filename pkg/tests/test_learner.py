import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cppomdp.config import LearnerConfig, TaskConfig
from cppomdp.learner import (
    Agent,
    ReplayBuffer,
    TrainingFault,
    choose_padding,
    double_q_target,
    egreedy_action,
    epsilon_for,
    forward,
    grad_check,
    load_checkpoint,
    make_net,
    save_checkpoint,
    tabular_q_update,
    td_step,
)
from oracles import bfs_distances, greedy_length, tabular_grid_q


class ConstNet(torch.nn.Module):
    """Returns a fixed row of action values for every input."""

    def __init__(self, values):
        super().__init__()
        self.values = torch.nn.Parameter(torch.tensor(values, dtype=torch.float32), requires_grad=False)

    def forward(self, x):
        return self.values.expand(x.shape[0], -1)


# network shape -------------------------------------------------------------------

@pytest.mark.parametrize("grid,pads", [(12, (1, 0, 0)), (8, (1, 0, 1))])
def test_net_ends_at_one_by_one(grid, pads):
    net = make_net(4, 4, grid, seed=0)
    assert tuple(net.spec["padding"]) == pads and not net.pooled
    h = net.features(torch.zeros(1, 4, grid, grid))
    assert h.shape[1:] == (64, 1, 1)
    assert net.head.in_features == 64


@pytest.mark.parametrize("grid", [8, 12])
def test_every_input_cell_reaches_the_output(grid):
    net = make_net(5, 9, grid, seed=1)
    x = torch.rand(1, 5, grid, grid, requires_grad=True)
    net(x).sum().backward()
    assert torch.all(x.grad.abs().sum(dim=1) > 0)


def test_uniform_padding_would_hide_the_top_rows():
    from cppomdp.learner import _coverage

    size, seen = _coverage(12, (1, 4, 4), (1, 1, 1))
    assert size == 1 and max(seen) < 11
    assert choose_padding(12) == (1, 0, 0)


def test_other_sizes_pool():
    net = make_net(4, 4, 16, seed=0)
    assert net(torch.zeros(2, 4, 16, 16)).shape == (2, 4)
    net = make_net(4, 4, 6, seed=0)
    assert net(torch.zeros(2, 4, 6, 6)).shape == (2, 4)


@pytest.mark.parametrize("c,n_out", [(4, 4), (5, 2), (5, 9)])
def test_output_lengths(c, n_out):
    assert forward(make_net(c, n_out, 12, seed=3), np.zeros((c, 12, 12), np.float32)).shape == (n_out,)


def test_zero_head_gives_zero_outputs():
    net = make_net(4, 4, 12, seed=0)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    out = forward(net, np.random.default_rng(0).random((3, 4, 12, 12)).astype(np.float32))
    np.testing.assert_array_equal(out, 0)


def test_batched_forward_preserves_order():
    net = make_net(4, 4, 12, seed=2)
    x = np.random.default_rng(1).random((5, 4, 12, 12)).astype(np.float32)
    batch = forward(net, x)
    for i in range(5):
        np.testing.assert_allclose(batch[i], forward(net, x[i]), rtol=1e-5, atol=1e-6)


def test_wrong_channel_count_is_rejected():
    with pytest.raises(ValueError):
        forward(make_net(4, 4, 12, seed=0), np.zeros((5, 12, 12), np.float32))


def test_init_is_seed_controlled_and_private():
    torch.manual_seed(123)
    before = torch.rand(1)
    a, b = make_net(4, 4, 12, seed=9), make_net(4, 4, 12, seed=9)
    torch.manual_seed(123)
    assert torch.rand(1) == before
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


# targets and updates ---------------------------------------------------------------

def test_double_q_target_terminal():
    y = double_q_target(ConstNet([0.0, 5.0]), ConstNet([3.0, 2.0]), [1.0], np.zeros((1, 1)), [True], 0.95)
    assert y.item() == pytest.approx(1.0)


def test_double_q_target_uses_online_argmax_and_target_value():
    # online picks action 1; target says 2.0 there (and 3.0 elsewhere)
    y = double_q_target(ConstNet([0.0, 5.0]), ConstNet([3.0, 2.0]), [0.0], np.zeros((1, 1)), [False], 0.95)
    assert y.item() == pytest.approx(1.9)


def test_double_q_target_myopic_limit():
    y = double_q_target(ConstNet([0.0, 5.0]), ConstNet([3.0, 2.0]), [0.7], np.zeros((1, 1)), [False], 0.0)
    assert y.item() == pytest.approx(0.7)


def test_identical_nets_give_vanilla_max_target():
    net = make_net(4, 4, 12, seed=4)
    x = np.random.default_rng(2).random((6, 4, 12, 12)).astype(np.float32)
    r = np.linspace(0, 1, 6).astype(np.float32)
    y = double_q_target(net, net, r, x, np.zeros(6, bool), 0.9).numpy()
    np.testing.assert_allclose(y, r + 0.9 * forward(net, x).max(axis=1), rtol=1e-5)


def fixed_batch(seed=0, m=8):
    rng = np.random.default_rng(seed)
    return (rng.random((m, 4, 12, 12)).astype(np.float32), rng.integers(0, 4, m),
            rng.random(m).astype(np.float32), rng.random((m, 4, 12, 12)).astype(np.float32),
            rng.random(m) < 0.3)


def test_td_step_reduces_the_loss_for_a_small_step():
    net = make_net(4, 4, 12, seed=5)
    target = make_net(4, 4, 12, seed=6)
    batch = fixed_batch()
    opt = torch.optim.SGD(net.parameters(), lr=1e-3)
    first = td_step(net, target, batch, opt, 0.95)
    second = td_step(net, target, batch, opt, 0.95)
    assert second < first


def test_zero_error_batch_leaves_sgd_parameters_unchanged():
    net = make_net(4, 4, 12, seed=5)
    obs, a, _, nxt, _ = fixed_batch()
    q = forward(net, obs)[np.arange(len(a)), a]
    done = np.ones(len(a), bool)
    before = [p.detach().clone() for p in net.parameters()]
    loss = td_step(net, net, (obs, a, q, nxt, done), torch.optim.SGD(net.parameters(), lr=0.1), 0.95)
    assert loss == pytest.approx(0.0, abs=1e-10)
    for p, b in zip(net.parameters(), before):
        torch.testing.assert_close(p, b, rtol=0, atol=1e-6)


def test_loss_is_permutation_invariant():
    net = make_net(4, 4, 12, seed=5)
    target = make_net(4, 4, 12, seed=6)
    batch = fixed_batch()
    perm = np.random.default_rng(3).permutation(8)
    shuffled = tuple(x[perm] for x in batch)
    l1 = td_step(net, target, batch, torch.optim.SGD(net.parameters(), lr=0.0), 0.95)
    l2 = td_step(net, target, shuffled, torch.optim.SGD(net.parameters(), lr=0.0), 0.95)
    assert l1 == pytest.approx(l2, rel=1e-6)


def test_non_finite_loss_is_a_training_fault():
    net = make_net(4, 4, 12, seed=5)
    obs, a, r, nxt, d = fixed_batch()
    r = r.copy()
    r[0] = np.inf
    with pytest.raises(TrainingFault):
        td_step(net, net, (obs, a, r, nxt, d), torch.optim.SGD(net.parameters(), lr=0.1), 0.95)


def test_tabular_update_examples():
    q = np.zeros((2, 2))
    assert tabular_q_update(q, 0, 1, 1.0, 1, 0.5, 0.95)[0, 1] == pytest.approx(0.5)
    q = np.array([[0.3, 0.1], [2.0, 1.0]])
    np.testing.assert_array_equal(tabular_q_update(q.copy(), 0, 0, 1.0, 1, 0.0, 0.95), q)
    assert tabular_q_update(q.copy(), 0, 0, 0.4, 1, 1.0, 0.0)[0, 0] == pytest.approx(0.4)


def test_tabular_converges_to_shortest_paths():
    n = 4
    cfg = TaskConfig(task="muling", n_targets=0, map_size=n, num_areas=4, num_buoys=1, rho=10.0)
    table, goals = tabular_grid_q(n, cfg, 50_000)
    cells = np.full((n, n), 1, dtype=np.int8)
    for goal in goals:
        dist = bfs_distances(cells, goal)
        for start, d in dist.items():
            if d:
                assert greedy_length(table, n, start, goal) == d


def test_unit_rho_makes_the_goal_unattractive():
    """With rho=1, sigma=0.22, lambda=0.95 dithering next to the goal pays more than finishing."""
    gamma, sigma, rho = 0.95, 0.22, 1.0
    assert gamma * sigma / (1 - gamma**2) > rho
    n = 4
    cfg = TaskConfig(task="muling", n_targets=0, map_size=n, num_areas=4, num_buoys=1, rho=rho)
    table, goals = tabular_grid_q(n, cfg, 50_000)
    lengths = [greedy_length(table, n, (g, n - 1), (g, n)) for g, _ in goals]
    assert max(lengths) == 100


# exploration ---------------------------------------------------------------------------

def test_epsilon_schedule():
    assert epsilon_for(0, 1000) == pytest.approx(0.9)
    assert epsilon_for(1000, 1000) == pytest.approx(0.1)
    assert epsilon_for(500, 1000) == pytest.approx(0.5)
    assert epsilon_for(5000, 1000) == pytest.approx(0.1)


def test_greedy_choice_and_ties():
    rng = np.random.default_rng(0)
    assert egreedy_action(np.array([1.0, 3.0, 2.0]), 0.0, rng) == 1
    assert egreedy_action(np.array([2.0, 2.0, 0.0]), 0.0, rng) == 0


def test_full_exploration_is_uniform():
    rng = np.random.default_rng(1)
    draws = egreedy_action(np.zeros((100_000, 4)), 1.0, rng)
    counts = np.bincount(draws, minlength=4)
    sd = np.sqrt(100_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 25_000) < 3 * sd)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=9), st.floats(-1e3, 1e3))
def test_greedy_invariant_to_shift(values, c):
    v = np.array(values)
    rng = np.random.default_rng(0)
    assert egreedy_action(v, 0.0, rng) == egreedy_action(v + c, 0.0, rng) or np.isclose(v, v.max()).sum() > 1


# gradient check ---------------------------------------------------------------------------

def test_grad_check_tiny_net():
    net = make_net(4, 4, 8, seed=0, strides=(1, 4))
    obs = np.random.default_rng(0).random((4, 8, 8))
    assert grad_check(net, obs, 2) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_grad_check_full_net_steps_around_relu_kinks(seed):
    # these seeds put a first-layer pre-activation within 1e-5 of zero
    net = make_net(4, 4, 12, seed=seed)
    obs = np.random.default_rng(seed).random((4, 12, 12))
    assert grad_check(net, obs, seed % 4, seed=seed) < 1e-4


class _WrongBackward(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x * 2

    @staticmethod
    def backward(ctx, g):
        return g * 2.5


class _Broken(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = torch.nn.Linear(3, 2)

    def forward(self, x):
        return _WrongBackward.apply(self.lin(x.flatten(1)))


def test_grad_check_catches_a_wrong_backward():
    net = _Broken()
    assert grad_check(net, np.ones((1, 3)), 0) == pytest.approx(0.2, abs=1e-6)


def test_grad_check_on_zero_net_is_finite():
    net = make_net(4, 4, 12, seed=0)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    err = grad_check(net, np.zeros((4, 12, 12)), 0)
    assert np.isfinite(err)


def test_grad_check_is_step_insensitive_on_linear_pieces():
    # away from kinks a ReLU net is linear, so only float64 roundoff (~eps/h) remains
    net = make_net(4, 4, 8, seed=3, strides=(1, 4))
    obs = np.random.default_rng(1).random((4, 8, 8))
    for h in (1e-3, 1e-5):
        assert grad_check(net, obs, 1, h=h) < 1e-6


# replay buffer and agent ---------------------------------------------------------------

def test_replay_buffer_is_fifo():
    buf = ReplayBuffer(5, (1, 2, 2))
    for i in range(7):
        buf.add(np.full((1, 1, 2, 2), i, np.uint8), np.array([i % 4]), np.array([float(i)]),
                np.zeros((1, 1, 2, 2), np.uint8), np.array([False]))
    assert len(buf) == 5
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0, 5.0, 6.0]
    with pytest.raises(ValueError):
        ReplayBuffer(5, (1, 2, 2)).sample(1, np.random.default_rng(0))


def test_replay_buffer_rejects_non_finite_rewards():
    buf = ReplayBuffer(5, (1, 2, 2))
    with pytest.raises(ValueError):
        buf.add(np.zeros((1, 1, 2, 2), np.uint8), np.array([0]), np.array([np.nan]),
                np.zeros((1, 1, 2, 2), np.uint8), np.array([False]))


def test_agent_trains_after_warmup_and_syncs_target():
    cfg = LearnerConfig(batch_size=4, warmup=8, train_every=2, target_sync=3, zeta=1e-3)
    agent = Agent.create(4, 4, 8, cfg, 101, init_seed=0, sampler_seed=1)
    obs = np.zeros((4, 4, 8, 8), np.uint8)
    for _ in range(4):
        agent.store(obs, np.arange(4), np.ones(4), obs, np.zeros(4, bool))
        agent.train()
    assert agent.updates == 6  # 2 per store, skipped until the buffer holds 8
    assert len(agent.losses) == 6
    # target_sync=3: the copy taken right after update 6 matches the online net
    assert all(torch.equal(p, q) for p, q in zip(agent.net.parameters(), agent.target.parameters()))
    agent.store(obs, np.arange(4), np.ones(4), obs, np.zeros(4, bool))
    agent.train()
    assert agent.updates == 8
    assert not all(torch.equal(p, q) for p, q in zip(agent.net.parameters(), agent.target.parameters()))


# checkpoints ------------------------------------------------------------------------------

@pytest.mark.parametrize("c,n_out,grid", [(4, 4, 12), (5, 9, 12), (5, 2, 8)])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, c, n_out, grid):
    net = make_net(c, n_out, grid, seed=11)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net, {"note": "x"})
    back, header = load_checkpoint(path)
    assert header["layer_spec"] == net.spec and header["extra"] == {"note": "x"}
    assert header["rng_state"]["init_seed"] == 11
    for (k, v), (k2, v2) in zip(net.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    save_checkpoint(tmp_path / "again.ckpt", back, {"note": "x"})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_payload_is_little_endian_float32(tmp_path):
    net = make_net(4, 4, 12, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net)
    raw = path.read_bytes()
    payload = raw[raw.index(b"\n") + 1:]
    first = next(iter(net.state_dict().values())).detach().numpy().ravel()
    np.testing.assert_array_equal(np.frombuffer(payload[:4 * first.size], "<f4"), first)
    assert len(payload) == 4 * sum(v.numel() for v in net.state_dict().values())


def test_bad_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"format": "nope", "version": 1}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)
