"""Simulated intraday futures market with unit positions and day-trading close-out.

The environment walks a bar series one step at a time. At each bar the agent
submits a target position in {-1, 0, +1}; the step reward combines the profit
of the position carried into the bar with the turnover cost of changing it.
At the final bar of a session any open position is force-closed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .bars import BarSeries
from .features import FeatureMatrix, StateUnavailableError, build_state

REWARD_MODES = ("training", "testing")

# Per-unit-turnover cost rate: 0.023 per mille of the traded price.
DEFAULT_COST_RATE = 2.3e-5


class Action(IntEnum):
    SHORT = -1
    FLAT = 0
    LONG = 1


#: Q-value column order; ties in an argmax resolve to the lowest index.
ACTION_ORDER = (Action.SHORT, Action.FLAT, Action.LONG)


def action_to_index(action) -> int:
    """Map an action in {-1, 0, 1} to its Q-value column {0, 1, 2}."""
    return int(action) + 1


def index_to_action(index: int) -> Action:
    return Action(index - 1)


class StateError(RuntimeError):
    """The environment was stepped past the end of its series."""


@dataclass(frozen=True)
class EnvConfig:
    cost_rate: float = DEFAULT_COST_RATE
    reward_mode: str = "testing"
    force_flat_at_session_end: bool = True

    def __post_init__(self):
        if self.cost_rate < 0:
            raise ValueError("cost_rate must be non-negative")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")


@dataclass(frozen=True)
class StepResult:
    reward: float
    next_state: np.ndarray | None
    done: bool
    prev_action: Action


def step_reward(prev_action, action, prev_price: float, price: float,
                cost_rate: float) -> float:
    """Profit of the held position over the last bar minus the turnover cost.

    The cost charges ``cost_rate * price`` per unit of position change, i.e.
    the rate applies to the price at which the change trades.
    """
    if prev_price <= 0 or price <= 0:
        raise ValueError("prices must be positive")
    turnover = abs(int(action) - int(prev_action))
    return int(prev_action) * (price - prev_price) - cost_rate * price * turnover


class TradingEnv:
    """Mutable cursor over an immutable (series, features) pair.

    One instance is single-threaded; run independent instances for parallel
    rollouts over the same data.
    """

    def __init__(self, series: BarSeries, features: FeatureMatrix,
                 config: EnvConfig, window_length: int):
        if features.n_rows != len(series):
            raise ValueError("features must have one row per bar")
        self.series = series
        self.features = features
        self.config = config
        self.window_length = int(window_length)
        self._t = None
        self._start = None
        self._pos = Action.FLAT
        self._terminal = True

    @property
    def position(self) -> Action:
        return self._pos

    @property
    def cursor(self) -> int:
        """Index of the bar the next ``step`` acts on."""
        if self._terminal:
            raise StateError("environment is terminal; call reset")
        return self._t

    def reset(self, start: int) -> np.ndarray:
        """Flatten the position and place the cursor at ``start``."""
        try:
            state = build_state(self.features, start, self.window_length)
        except StateUnavailableError as exc:
            raise ValueError(f"cannot start at bar {start}: {exc}") from exc
        self._t = int(start)
        self._start = int(start)
        self._pos = Action.FLAT
        self._terminal = False
        return state

    def step(self, action) -> StepResult:
        """Apply ``action`` at the cursor bar and advance one bar.

        ``done`` is True exactly at session end or series end. ``next_state``
        is None only when the series is exhausted.
        """
        if self._terminal:
            raise StateError("environment is terminal; call reset")
        a = Action(int(action))
        t, pos = self._t, self._pos
        closes = self.series.closes
        session_last = self.series.is_session_last(t)
        effective = Action.FLAT if (session_last and self.config.force_flat_at_session_end) else a
        prev_price = closes[t - 1] if t > self._start else closes[t]
        if self.config.reward_mode == "training":
            reward = 0.0
        else:
            reward = step_reward(pos, effective, float(prev_price), float(closes[t]),
                                 self.config.cost_rate)
        done = session_last or t == len(self.series) - 1
        self._pos = effective
        self._t = t + 1
        if self._t >= len(self.series):
            self._terminal = True
            next_state = None
        else:
            next_state = build_state(self.features, self._t, self.window_length)
        return StepResult(reward=float(reward), next_state=next_state,
                          done=done, prev_action=pos)
