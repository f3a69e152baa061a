"""Backtesting with a rolling-band stop-loss, plus profit/Sharpe/Sortino metrics.

Any policy that maps a bar index to an action can be evaluated: a learned
greedy value policy or a rule strategy's ``SignalSeries``. The stop-loss
overlay closes a position for one step when price crosses the trailing
mean +/- one standard deviation band against it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import qnet
from .bars import BarSeries
from .baselines import SignalSeries
from .env import EnvConfig, TradingEnv
from .features import FeatureMatrix, build_state
from .qnet import QNetParams
from .training import select_action


@dataclass(frozen=True)
class StopLossParams:
    k: int = 25
    enabled: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("stop-loss window k must be >= 2")


def stop_loss_check(trailing_closes, position, price: float, *, k: int | None = None) -> bool:
    """Should the position be closed at ``price`` given the trailing closes?

    Bands are the mean +/- one population standard deviation of the trailing
    window (the last ``k`` closes when ``k`` is given). Fires when price is
    strictly above the upper band while short, or strictly below the lower
    band while long. With fewer than ``k`` closes the stop is inactive.
    """
    if int(position) == 0:
        return False
    closes = np.asarray(trailing_closes, dtype=np.float64)
    if k is not None:
        if closes.size < k:
            return False
        closes = closes[-k:]
    if closes.size == 0:
        return False
    mu = float(closes.mean())
    delta = float(closes.std())
    if int(position) < 0:
        return price > mu + delta
    return price < mu - delta


class GreedyPolicy:
    """Greedy argmax over the value network's outputs, ties to the lowest index."""

    def __init__(self, params: QNetParams, window_length: int, name: str = "q_policy"):
        self.params = params
        self.window_length = int(window_length)
        self.name = name

    def action_at(self, t: int, features: FeatureMatrix) -> int:
        q = qnet.forward(self.params, build_state(features, t, self.window_length))
        return int(select_action(q, 0.0))


def accumulated_profit(rewards) -> float:
    """Sum of per-step rewards."""
    return float(np.sum(np.asarray(rewards, dtype=np.float64)))


def sharpe(rewards) -> float:
    """Mean over population standard deviation of per-step rewards; 0 if flat."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return 0.0
    sd = float(r.std())
    if sd == 0.0:
        return 0.0
    return float(r.mean()) / sd


def sortino(rewards) -> float:
    """Mean reward over the population standard deviation of the strictly
    negative rewards; 0 when there is no downside sample or it has no spread."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return 0.0
    downside = r[r < 0]
    if downside.size == 0:
        return 0.0
    sd = float(downside.std())
    if sd == 0.0:
        return 0.0
    return float(r.mean()) / sd


@dataclass
class BacktestReport:
    """Step records and summary metrics for one strategy run.

    The equity curve is the running sum of rewards; ``profit`` is its final
    value. Sharpe and Sortino are per-step ratios (not annualized), which the
    JSON output labels explicitly.
    """

    strategy: str
    timestamps: np.ndarray
    rewards: np.ndarray
    equity: np.ndarray
    actions: np.ndarray
    stop_triggers: np.ndarray
    profit: float
    sharpe: float
    sortino: float
    trade_count: int
    stop_loss_trigger_count: int
    config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "steps": int(self.rewards.size),
            "profit": self.profit,
            "sharpe": self.sharpe,
            "sortino": self.sortino,
            "ratio_basis": "per_step",
            "trade_count": self.trade_count,
            "stop_loss_trigger_count": self.stop_loss_trigger_count,
            "config": self.config,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def save_equity_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("timestamp,reward,equity,action,stop_triggered\n")
            for i in range(self.rewards.size):
                fh.write(f"{int(self.timestamps[i])},{float(self.rewards[i])!r},"
                         f"{float(self.equity[i])!r},{int(self.actions[i])},"
                         f"{int(self.stop_triggers[i])}\n")


def run_backtest(policy, series: BarSeries, features: FeatureMatrix,
                 env_config: EnvConfig, stop: StopLossParams,
                 start: int | None = None, end: int | None = None,
                 config_echo: dict | None = None) -> BacktestReport:
    """Replay ``policy`` through the testing-mode market over [start, end].

    The stop-loss is evaluated before each step against the position carried
    into the bar; when it fires the step's action is overridden to flat (the
    policy may re-enter on the next bar). Session-end close-out is enforced
    by the environment.
    """
    if env_config.reward_mode != "testing":
        env_config = EnvConfig(cost_rate=env_config.cost_rate,
                               reward_mode="testing",
                               force_flat_at_session_end=env_config.force_flat_at_session_end)
    if isinstance(policy, SignalSeries) and len(policy.actions) != len(series):
        raise ValueError("signal series does not match the bar series")

    window_length = getattr(policy, "window_length", 1)
    env = TradingEnv(series, features, env_config, window_length)
    first = features.first_state_index(window_length)
    start = first if start is None else int(start)
    end = len(series) - 1 if end is None else int(end)
    if start < first:
        raise ValueError(
            f"backtest start {start} precedes the first full state window at {first}")
    if end < start or end >= len(series):
        raise ValueError(f"invalid backtest range [{start}, {end}]")

    n = end - start + 1
    rewards = np.zeros(n)
    actions = np.zeros(n, dtype=np.int8)
    triggers = np.zeros(n, dtype=bool)
    closes = series.closes

    env.reset(start)
    for i, t in enumerate(range(start, end + 1)):
        pos = int(env.position)
        if isinstance(policy, SignalSeries):
            a = policy.action_at(t)
        else:
            a = policy.action_at(t, features)
        fired = (stop.enabled
                 and stop_loss_check(closes[max(0, t - stop.k):t], pos,
                                     float(closes[t]), k=stop.k))
        if fired:
            a = 0
        result = env.step(a)
        rewards[i] = result.reward
        actions[i] = int(env.position)
        triggers[i] = fired

    equity = np.cumsum(rewards)
    prev = np.concatenate(([0], actions[:-1]))
    report = BacktestReport(
        strategy=getattr(policy, "name", policy.__class__.__name__.lower()),
        timestamps=series.timestamps[start:end + 1].copy(),
        rewards=rewards,
        equity=equity,
        actions=actions,
        stop_triggers=triggers,
        profit=float(equity[-1]) if n else 0.0,
        sharpe=sharpe(rewards),
        sortino=sortino(rewards),
        trade_count=int(np.count_nonzero(actions != prev)),
        stop_loss_trigger_count=int(triggers.sum()),
        config=config_echo or {},
    )
    return report
