import itertools

import numpy as np
import pytest

from expertq.bars import SynthSpec, synth_series
from expertq.env import Action
from expertq.expert import SessionBoundaryError, expert_action, expert_trajectory

from conftest import series_from_closes


class TestExpertAction:
    def test_rising_close_goes_long(self):
        s = series_from_closes([100.0, 101.0])
        assert expert_action(s, 0) == Action.LONG

    def test_falling_close_goes_short(self):
        s = series_from_closes([100.0, 99.5])
        assert expert_action(s, 0) == Action.SHORT

    def test_unchanged_close_stays_flat(self):
        s = series_from_closes([100.0, 100.0])
        assert expert_action(s, 0) == Action.FLAT

    def test_session_boundary_rejected(self):
        s = series_from_closes([1.0, 2.0, 3.0, 4.0], bars_per_day=2)
        with pytest.raises(SessionBoundaryError):
            expert_action(s, 1)
        assert expert_action(s, 2) == Action.LONG

    def test_last_bar_rejected(self):
        s = series_from_closes([1.0, 2.0])
        with pytest.raises(SessionBoundaryError):
            expert_action(s, 1)


class TestExpertTrajectory:
    def test_strictly_increasing_single_session(self):
        s = series_from_closes([1.0, 2.0, 3.0, 4.0])
        assert expert_trajectory(s).tolist() == [1, 1, 1, 0]

    def test_constant_closes_all_flat(self):
        s = series_from_closes([5.0] * 6, bars_per_day=3)
        assert expert_trajectory(s).tolist() == [0] * 6

    def test_session_finals_forced_flat(self):
        s = series_from_closes([1.0, 2.0, 3.0, 2.0, 5.0, 1.0], bars_per_day=3)
        traj = expert_trajectory(s)
        assert traj.tolist() == [1, 1, 0, 1, -1, 0]

    def test_matches_per_bar_rule(self):
        s = synth_series(SynthSpec(kind="random_walk", length=40, volatility=1.0,
                                   base_price=200.0, bars_per_day=8, frequency=1), 3)
        traj = expert_trajectory(s)
        for t in range(40):
            if s.is_session_last(t):
                assert traj[t] == 0
            else:
                assert traj[t] == int(expert_action(s, t))

    def test_sign_equivariance(self):
        closes = [100.0, 101.5, 100.5, 102.0, 101.0]
        mirrored = [100.0 + (100.0 - c) for c in closes]
        a = expert_trajectory(series_from_closes(closes))
        b = expert_trajectory(series_from_closes(mirrored))
        np.testing.assert_array_equal(a, -b)


def eq4_total(closes, actions, cost_rate=0.0):
    """Direct evaluation of the per-step reward formula over a single session."""
    total = 0.0
    pos = 0
    for t in range(len(actions)):
        if t > 0:
            total += pos * (closes[t] - closes[t - 1])
        total -= cost_rate * closes[t] * abs(actions[t] - pos)
        pos = actions[t]
    return total


class TestOptimality:
    @pytest.mark.parametrize("seed", range(6))
    def test_no_sequence_beats_expert_exhaustively(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 8))
        closes = 100.0 + np.round(rng.standard_normal(n), 2)
        s = series_from_closes(closes)
        traj = expert_trajectory(s).tolist()
        expert_total = eq4_total(closes, traj)
        best = max(eq4_total(closes, list(seq))
                   for seq in itertools.product((-1, 0, 1), repeat=n))
        assert best <= expert_total + 1e-12

    def test_expert_total_is_sum_of_absolute_moves(self):
        closes = np.array([10.0, 11.0, 9.5, 9.5, 12.0])
        s = series_from_closes(closes)
        traj = expert_trajectory(s).tolist()
        assert eq4_total(closes, traj) == pytest.approx(np.abs(np.diff(closes)).sum())
