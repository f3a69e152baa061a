import math

import numpy as np
import pytest

from expertq import qnet
from expertq.bars import SynthSpec, synth_series
from expertq.env import Action, action_to_index
from expertq.expert import expert_trajectory
from expertq.features import FactorSpec, compute_features, normalize
from expertq.training import (BufferFullError, ReplayBuffer, TrainConfig,
                              Transition, agent_loss, expert_loss,
                              loss_and_gradient, run_training_loop,
                              select_action, total_loss, train)


def scalar_loss_oracle(batch, params, gamma, expert):
    """Per-transition re-statement of the squared TD-error, coded separately
    from both production paths."""
    terms = []
    for tr in batch:
        r = tr.r_e if expert else tr.r
        a = tr.a_e if expert else tr.a
        if tr.s_next is None:
            target = r
        else:
            target = r + gamma * max(float(v) for v in qnet.forward(params, tr.s_next))
        q_sa = float(qnet.forward(params, tr.s)[action_to_index(a)])
        terms.append((target - q_sa) ** 2)
    return sum(terms) / len(terms)


def random_transitions(rng, c, length, size, terminal_frac=0.25):
    out = []
    for _ in range(size):
        s = rng.standard_normal((length, c))
        s_next = None if rng.random() < terminal_frac else rng.standard_normal((length, c))
        out.append(Transition(
            s=s, a=int(rng.integers(-1, 2)), a_e=int(rng.integers(-1, 2)),
            r=float(rng.standard_normal()), r_e=float(rng.standard_normal()),
            s_next=s_next))
    return out


def tiny_frame(length=80, bars_per_day=40, seed=5):
    series = synth_series(SynthSpec(kind="sine", length=length, period=10,
                                    bars_per_day=bars_per_day, frequency=1), seed)
    factors = [FactorSpec("m2", "momentum", 2), FactorSpec("r2", "return", 2)]
    feats = normalize(compute_features(series, factors), 8)
    return series, feats, expert_trajectory(series)


class TestSelectAction:
    def test_pure_argmax(self):
        assert select_action(np.array([0.1, 0.5, 0.2]), 0.0) == Action.FLAT

    def test_tie_breaks_to_lowest_index(self):
        assert select_action(np.array([0.5, 0.5, 0.1]), 0.0) == Action.SHORT
        assert select_action(np.array([0.1, 0.5, 0.5]), 0.0) == Action.FLAT

    def test_uniform_when_fully_random(self):
        rng = np.random.default_rng(77)
        draws = [int(select_action(np.array([9.0, 0.0, 0.0]), 1.0, rng))
                 for _ in range(30000)]
        for a in (-1, 0, 1):
            assert abs(draws.count(a) / 30000 - 1 / 3) < 0.01

    def test_epsilon_bounds_checked(self):
        with pytest.raises(ValueError):
            select_action(np.zeros(3), 1.5, np.random.default_rng(0))

    def test_positive_epsilon_needs_rng(self):
        with pytest.raises(ValueError):
            select_action(np.zeros(3), 0.5)


class TestReplayBuffer:
    def _tr(self, i):
        return Transition(s=np.zeros((1, 1)), a=0, a_e=0, r=float(i), r_e=1.0,
                          s_next=None)

    def test_full_on_capacity(self):
        buf = ReplayBuffer(3)
        assert buf.push(self._tr(0)) is False
        assert buf.push(self._tr(1)) is False
        assert buf.push(self._tr(2)) is True

    def test_not_full_below_capacity(self):
        buf = ReplayBuffer(3)
        buf.push(self._tr(0))
        buf.push(self._tr(1))
        assert not buf.is_full

    def test_push_into_full_rejected(self):
        buf = ReplayBuffer(1)
        buf.push(self._tr(0))
        with pytest.raises(BufferFullError):
            buf.push(self._tr(1))

    def test_evicting_mode_drops_oldest(self):
        buf = ReplayBuffer(2, evict_oldest=True)
        for i in range(4):
            buf.push(self._tr(i))
        rewards = sorted(t.r for t in buf.sample(2, np.random.default_rng(0)))
        assert rewards == [2.0, 3.0]

    def test_sample_whole_buffer_is_permutation(self):
        buf = ReplayBuffer(5)
        for i in range(5):
            buf.push(self._tr(i))
        batch = buf.sample(5, np.random.default_rng(1))
        assert sorted(t.r for t in batch) == [0.0, 1.0, 2.0, 3.0, 4.0]

    def test_sample_zero_is_empty(self):
        buf = ReplayBuffer(2)
        buf.push(self._tr(0))
        assert buf.sample(0, np.random.default_rng(0)) == []

    def test_oversample_rejected(self):
        buf = ReplayBuffer(4)
        buf.push(self._tr(0))
        with pytest.raises(ValueError):
            buf.sample(2, np.random.default_rng(0))

    def test_single_draws_approximately_uniform(self):
        buf = ReplayBuffer(4)
        for i in range(4):
            buf.push(self._tr(i))
        rng = np.random.default_rng(3)
        counts = {float(i): 0 for i in range(4)}
        for _ in range(8000):
            counts[buf.sample(1, rng)[0].r] += 1
        for c in counts.values():
            assert abs(c / 8000 - 0.25) < 0.02


class TestLosses:
    def test_gamma_zero_perfect_prediction(self):
        params = qnet.init(1, 1, seed=0)
        zeroed = qnet.QNetParams(**{k: np.zeros_like(v)
                                    for k, v in params.arrays().items()})
        tr = Transition(s=np.zeros((1, 1)), a=0, a_e=0, r=0.0, r_e=1.0,
                        s_next=np.zeros((1, 1)))
        assert agent_loss([tr], zeroed, 0.0) == pytest.approx(0.0)
        assert expert_loss([tr], zeroed, 0.0) == pytest.approx(1.0)

    def test_symmetry_when_expert_mirrors_agent(self, rng):
        params = qnet.init(2, 3, seed=1)
        batch = [Transition(s=t.s, a=t.a, a_e=t.a, r=t.r, r_e=t.r, s_next=t.s_next)
                 for t in random_transitions(rng, 2, 3, 6)]
        assert expert_loss(batch, params, 0.9) == pytest.approx(
            agent_loss(batch, params, 0.9), abs=1e-12)
        assert total_loss(batch, params, 0.9) == pytest.approx(
            agent_loss(batch, params, 0.9), abs=1e-12)

    def test_total_is_midpoint(self, rng):
        params = qnet.init(2, 2, seed=2)
        batch = random_transitions(rng, 2, 2, 5)
        la = agent_loss(batch, params, 0.8)
        le = expert_loss(batch, params, 0.8)
        assert total_loss(batch, params, 0.8) == pytest.approx((la + le) / 2, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_losses_match_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        params = qnet.init(3, 3, seed=seed)
        batch = random_transitions(rng, 3, 4, 6)
        gamma = float(rng.uniform(0, 1))
        oa = scalar_loss_oracle(batch, params, gamma, expert=False)
        oe = scalar_loss_oracle(batch, params, gamma, expert=True)
        assert agent_loss(batch, params, gamma) == pytest.approx(oa, abs=1e-10)
        assert expert_loss(batch, params, gamma) == pytest.approx(oe, abs=1e-10)
        la, le, _ = loss_and_gradient(batch, params, gamma)
        assert la == pytest.approx(oa, abs=1e-10)
        assert le == pytest.approx(oe, abs=1e-10)

    def test_dual_gradient_matches_finite_difference_totals(self, rng):
        # the gradient of (agent + expert)/2 against fixed targets
        params = qnet.init(2, 3, seed=8)
        batch = random_transitions(rng, 2, 3, 4)
        gamma = 0.7
        _, _, grads = loss_and_gradient(batch, params, gamma)

        targets_a = [tr.r if tr.s_next is None
                     else tr.r + gamma * float(np.max(qnet.forward(params, tr.s_next)))
                     for tr in batch]
        targets_e = [tr.r_e if tr.s_next is None
                     else tr.r_e + gamma * float(np.max(qnet.forward(params, tr.s_next)))
                     for tr in batch]

        def frozen_loss(p):
            qa = [float(qnet.forward(p, tr.s)[action_to_index(tr.a)]) for tr in batch]
            qe = [float(qnet.forward(p, tr.s)[action_to_index(tr.a_e)]) for tr in batch]
            la = sum((q - y) ** 2 for q, y in zip(qa, targets_a)) / len(batch)
            le = sum((q - y) ** 2 for q, y in zip(qe, targets_e)) / len(batch)
            return 0.5 * (la + le)

        eps = 1e-5
        for name, arr in params.arrays().items():
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + eps
                lp = frozen_loss(params)
                arr[ix] = orig - eps
                lm = frozen_loss(params)
                arr[ix] = orig
                fd = (lp - lm) / (2 * eps)
                denom = max(abs(fd), abs(grads[name][ix]), 1e-7)
                assert abs(fd - grads[name][ix]) / denom < 1e-4


class TestEpsilonSchedule:
    def test_linear_then_flat(self):
        cfg = TrainConfig(episodes=2, steps_per_episode=100, buffer_capacity=10,
                          batch_size=5, eps_start=1.0, eps_end=0.1)
        eps = [cfg.epsilon_at(s) for s in range(cfg.total_steps + 1)]
        assert eps[0] == 1.0
        assert all(a >= b for a, b in zip(eps, eps[1:]))
        assert eps[100] == pytest.approx(0.1)
        assert eps[-1] == pytest.approx(0.1)

    def test_explicit_decay_steps(self):
        cfg = TrainConfig(episodes=1, steps_per_episode=10, buffer_capacity=4,
                          batch_size=2, eps_start=0.8, eps_end=0.2,
                          eps_decay_steps=4)
        assert cfg.epsilon_at(2) == pytest.approx(0.5)
        assert cfg.epsilon_at(4) == pytest.approx(0.2)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(episodes=1, steps_per_episode=1, gamma=1.5)
        with pytest.raises(ValueError):
            TrainConfig(episodes=1, steps_per_episode=1, buffer_capacity=4,
                        batch_size=8)
        with pytest.raises(ValueError):
            TrainConfig(episodes=1, steps_per_episode=1, eps_start=0.1,
                        eps_end=0.9)


class TestTrainLoop:
    def test_single_fill_single_update(self):
        series, feats, traj = tiny_frame()
        cfg = TrainConfig(episodes=1, steps_per_episode=4, buffer_capacity=4,
                          batch_size=4, hidden_size=3, window_length=2, seed=1)
        _, log = train(cfg, series, feats, traj)
        assert log.n_updates == 1
        assert log.final_buffer_size == 0
        assert log.steps_taken == 4

    @pytest.mark.parametrize("steps,capacity", [(4, 4), (10, 4), (7, 3), (5, 8), (12, 5)])
    def test_updates_per_episode_is_ceil_steps_over_capacity(self, steps, capacity):
        series, feats, traj = tiny_frame()
        cfg = TrainConfig(episodes=2, steps_per_episode=steps,
                          buffer_capacity=capacity, batch_size=min(2, capacity),
                          hidden_size=2, window_length=2, seed=3)
        _, log = train(cfg, series, feats, traj)
        expected = math.ceil(steps / capacity)
        assert log.updates_per_episode == [expected, expected]

    def test_deterministic_given_seed(self):
        series, feats, traj = tiny_frame()
        cfg = TrainConfig(episodes=2, steps_per_episode=12, buffer_capacity=6,
                          batch_size=4, hidden_size=4, window_length=3, seed=9)
        p1, log1 = train(cfg, series, feats, traj)
        p2, log2 = train(cfg, series, feats, traj)
        assert log1.rows == log2.rows
        for k in p1.arrays():
            np.testing.assert_array_equal(p1.arrays()[k], p2.arrays()[k])

    def test_training_rewards_are_constants(self):
        # constant reward scheme: every stored agent reward 0, expert reward 1
        series, feats, traj = tiny_frame()
        seen = []
        orig_push = ReplayBuffer.push

        def spy(self, tr):
            seen.append((tr.r, tr.r_e))
            return orig_push(self, tr)

        ReplayBuffer.push = spy
        try:
            cfg = TrainConfig(episodes=1, steps_per_episode=6, buffer_capacity=3,
                              batch_size=2, hidden_size=2, window_length=2, seed=0)
            train(cfg, series, feats, traj)
        finally:
            ReplayBuffer.push = orig_push
        assert seen and all(r == 0.0 and r_e == 1.0 for r, r_e in seen)

    def test_series_too_short_rejected(self):
        series, feats, traj = tiny_frame(length=30, bars_per_day=30)
        cfg = TrainConfig(episodes=1, steps_per_episode=500, buffer_capacity=8,
                          batch_size=4, hidden_size=2, window_length=2, seed=0)
        with pytest.raises(ValueError, match="bars"):
            train(cfg, series, feats, traj)

    def test_epsilon_column_reaches_end_value(self):
        series, feats, traj = tiny_frame()
        cfg = TrainConfig(episodes=3, steps_per_episode=10, buffer_capacity=5,
                          batch_size=3, hidden_size=2, window_length=2, seed=2,
                          eps_start=1.0, eps_end=0.05)
        _, log = train(cfg, series, feats, traj)
        eps_col = [row[2] for row in log.rows]
        assert all(a >= b for a, b in zip(eps_col, eps_col[1:]))
        assert eps_col[-1] == pytest.approx(0.05)

    def test_persistent_buffer_keeps_transitions(self):
        series, feats, traj = tiny_frame()
        cfg = TrainConfig(episodes=1, steps_per_episode=8, buffer_capacity=4,
                          batch_size=2, hidden_size=2, window_length=2, seed=4,
                          persistent_buffer=True)
        _, log = train(cfg, series, feats, traj)
        assert log.final_buffer_size == 4

    def test_log_csv_round_trip(self, tmp_path):
        series, feats, traj = tiny_frame()
        cfg = TrainConfig(episodes=1, steps_per_episode=4, buffer_capacity=4,
                          batch_size=2, hidden_size=2, window_length=2, seed=6)
        _, log = train(cfg, series, feats, traj)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "update_index,episode,epsilon,loss_agent,loss_expert,loss_total"
        assert len(lines) == 1 + log.n_updates
