"""Comparison strategies: Buy & Hold, MACD, Dual Thrust, plain DQN, and
behavior cloning.

The technical strategies emit one action per bar as a ``SignalSeries``; the
two learners reuse the Q-network and the shared training loop machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import qnet, training
from .bars import BarSeries
from .env import action_to_index
from .features import FeatureMatrix, ema
from .qnet import QNetParams
from .training import TrainConfig, TrainingLog


@dataclass
class SignalSeries:
    """Per-bar actions of a rule strategy; flat at every session's final bar."""

    actions: np.ndarray
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int8)
        bad = set(np.unique(self.actions)) - {-1, 0, 1}
        if bad:
            raise ValueError(f"signal actions must be in {{-1, 0, 1}}, found {bad}")

    def action_at(self, t: int) -> int:
        return int(self.actions[t])

    def to_csv(self, path, timestamps) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("timestamp,action\n")
            for ts, a in zip(timestamps, self.actions):
                fh.write(f"{int(ts)},{int(a)}\n")


@dataclass(frozen=True)
class MacdParams:
    short_period: int = 12
    long_period: int = 26
    dea_period: int = 9

    def __post_init__(self):
        if min(self.short_period, self.long_period, self.dea_period) < 1:
            raise ValueError("MACD periods must be >= 1")
        if self.short_period >= self.long_period:
            raise ValueError("short_period must be below long_period")


@dataclass(frozen=True)
class DualThrustParams:
    """``window`` is a bar count; None means the whole previous session."""

    window: int | None = None
    k1: float = 0.5
    k2: float = 0.5

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1 bar")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("K1 and K2 must be positive")


def buy_and_hold(series: BarSeries) -> SignalSeries:
    """Long every bar, closed out at each session's final bar."""
    actions = np.ones(len(series), dtype=np.int8)
    actions[series.session_last_indices()] = 0
    return SignalSeries(actions=actions, name="buy_and_hold")


def macd_indicator(closes: np.ndarray, params: MacdParams) -> tuple[np.ndarray, np.ndarray]:
    """DIF (fast minus slow EMA of closes) and DEA (EMA of DIF)."""
    closes = np.asarray(closes, dtype=np.float64)
    dif = ema(closes, params.short_period) - ema(closes, params.long_period)
    dea = ema(dif, params.dea_period)
    return dif, dea


def macd_signals(series: BarSeries, params: MacdParams = MacdParams()) -> SignalSeries:
    """Long when DIF crosses strictly above DEA with DIF > 0; short on the
    mirror-image cross; otherwise hold the previous signal state."""
    if len(series) <= params.long_period:
        raise ValueError(
            f"series length {len(series)} must exceed the long period "
            f"{params.long_period}")
    dif, dea = macd_indicator(series.closes, params)
    actions = np.zeros(len(series), dtype=np.int8)
    state = 0
    for t in range(1, len(series)):
        if dif[t] > dea[t] and dif[t - 1] <= dea[t - 1] and dif[t] > 0:
            state = 1
        elif dif[t] < dea[t] and dif[t - 1] >= dea[t - 1] and dif[t] < 0:
            state = -1
        actions[t] = state
    actions[series.session_last_indices()] = 0
    return SignalSeries(actions=actions, name="macd",
                        params={"short_period": params.short_period,
                                "long_period": params.long_period,
                                "dea_period": params.dea_period})


def dual_thrust_lines(series: BarSeries, params: DualThrustParams = DualThrustParams()):
    """Per-session breakout lines, or None while history is insufficient.

    Returns a list with one entry per session: ``(range_width, buy_line,
    sell_line)`` computed from the trailing window of bars that ends at the
    previous session's final bar.
    """
    lines = []
    for sid, (a, _) in enumerate(series.sessions):
        window = params.window
        if window is None:
            if sid == 0:
                lines.append(None)
                continue
            p_start, p_stop = series.sessions[sid - 1]
            lo, hi = p_start, p_stop
        else:
            lo, hi = a - window, a
        if lo < 0 or hi <= lo:
            lines.append(None)
            continue
        hh = float(series.highs[lo:hi].max())
        ll = float(series.lows[lo:hi].min())
        hc = float(series.closes[lo:hi].max())
        lc = float(series.closes[lo:hi].min())
        r = max(hh - lc, hc - ll)
        session_open = float(series.opens[a])
        lines.append((r, session_open + params.k1 * r, session_open - params.k2 * r))
    return lines


def dual_thrust_signals(series: BarSeries,
                        params: DualThrustParams = DualThrustParams()) -> SignalSeries:
    """Breakout strategy: long above the buy line, short below the sell line
    (strict inequalities), holding between signals within the session."""
    lines = dual_thrust_lines(series, params)
    actions = np.zeros(len(series), dtype=np.int8)
    for sid, (a, b) in enumerate(series.sessions):
        if lines[sid] is None:
            continue
        _, buy_line, sell_line = lines[sid]
        state = 0
        for t in range(a, b):
            c = series.closes[t]
            if c > buy_line:
                state = 1
            elif c < sell_line:
                state = -1
            actions[t] = state
    actions[series.session_last_indices()] = 0
    return SignalSeries(actions=actions, name="dual_thrust",
                        params={"window": params.window,
                                "k1": params.k1, "k2": params.k2})


def train_dqn(config: TrainConfig, series: BarSeries, features: FeatureMatrix,
              cost_rate: float = 0.0,
              checkpoint_dir=None) -> tuple[QNetParams, TrainingLog]:
    """Plain deep Q-learning: market profit as the reward, agent TD loss only."""
    return training.run_training_loop(
        config, series, features, trajectory=None,
        reward_source="profit", agent_only=True, mirror_expert=True,
        cost_rate=cost_rate, checkpoint_dir=checkpoint_dir)


def cross_entropy_loss(params: QNetParams, windows: np.ndarray,
                       labels: np.ndarray) -> float:
    """Mean cross-entropy of softmaxed action values against action labels."""
    q = qnet.forward_batch(params, windows)
    logp = q - _logsumexp(q)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _logsumexp(q: np.ndarray) -> np.ndarray:
    m = q.max(axis=1, keepdims=True)
    return m + np.log(np.exp(q - m).sum(axis=1, keepdims=True))


def train_bc(config: TrainConfig, series: BarSeries, features: FeatureMatrix,
             trajectory: np.ndarray, checkpoint_dir=None) -> tuple[QNetParams, TrainingLog]:
    """Behavior cloning: fit softmaxed action values to the demonstration
    labels with Adam; no market reward is involved.

    ``episodes`` counts epochs over the demonstration set; the loss columns of
    the log all carry the cross-entropy.
    """
    if len(trajectory) != len(series):
        raise ValueError("trajectory must have one action per bar")
    start = features.first_state_index(config.window_length)
    indices = np.arange(start, len(series))
    if indices.size == 0:
        raise ValueError("no bars with a full state window")
    windows = np.stack([features.values[t - config.window_length + 1:t + 1]
                        for t in indices])
    labels = np.array([action_to_index(trajectory[t]) for t in indices])

    params = qnet.init(features.n_columns, config.hidden_size, config.seed)
    opt = qnet.init_optimizer(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    update_index = 0
    for epoch in range(config.episodes):
        order = rng.permutation(indices.size)
        for lo in range(0, indices.size, config.batch_size):
            pick = order[lo:lo + config.batch_size]
            w = windows[pick]
            y = labels[pick]
            q = qnet.forward_batch(params, w)
            logp = q - _logsumexp(q)
            loss = float(-logp[np.arange(len(pick)), y].mean())
            if not math.isfinite(loss):
                raise training.TrainingDivergedError(
                    f"non-finite loss at update {update_index + 1}", params, log)
            dq = np.exp(logp)
            dq[np.arange(len(pick)), y] -= 1.0
            dq /= len(pick)
            grads = qnet.backward(params, w, dq)
            if config.grad_clip:
                grads, _ = qnet.clip_gradients(grads, config.grad_clip)
            params, opt = qnet.adam_step(params, grads, opt)
            update_index += 1
            log.add(update_index, epoch, 0.0, loss, loss, loss)
        log.updates_per_episode.append(
            log.n_updates - sum(log.updates_per_episode))
    log.steps_taken = config.episodes * indices.size
    if checkpoint_dir is not None and config.checkpoint_every:
        training._maybe_checkpoint(checkpoint_dir, params, opt, update_index)
    return params, log
