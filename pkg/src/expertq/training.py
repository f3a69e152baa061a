"""Replay buffer, TD losses, and the expert-guided training loop.

Training interleaves two signals over the same market states: the TD-error of
the agent's own actions (constant reward 0) and the TD-error of the
demonstrator's actions (constant reward 1). The loss per update is the plain
average of the two; minimizing it pushes demonstrated actions above the
alternatives without ever fitting labels directly.

The loop fills the replay buffer to capacity (or to the episode's step
budget), performs exactly one mini-batch update, clears the buffer, and
repeats. A ``persistent_buffer`` flag switches to the conventional keep-and-
evict replay discipline for comparison runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import qnet
from .bars import BarSeries
from .env import Action, ACTION_ORDER, EnvConfig, TradingEnv, action_to_index
from .features import FeatureMatrix
from .qnet import QNetParams

logger = logging.getLogger(__name__)

TRAINING_LOG_HEADER = ("update_index", "episode", "epsilon",
                       "loss_agent", "loss_expert", "loss_total")


class BufferFullError(RuntimeError):
    """Pushed into a full buffer outside the evicting (persistent) mode."""


@dataclass(frozen=True)
class Transition:
    """One replay sample: state, agent/expert actions and rewards, next state.

    ``s_next`` is None exactly when the step ended its episode segment
    (session end, series end, or the episode's step budget).
    """

    s: np.ndarray
    a: int
    a_e: int
    r: float
    r_e: float
    s_next: np.ndarray | None


class ReplayBuffer:
    """FIFO transition store with a hard capacity."""

    def __init__(self, capacity: int, evict_oldest: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.evict_oldest = evict_oldest
        self._items: list[Transition] = []

    def __len__(self) -> int:
        return len(self._items)

    @property
    def is_full(self) -> bool:
        return len(self._items) >= self.capacity

    def push(self, transition: Transition) -> bool:
        """Append one transition; returns True when the buffer is now full."""
        if self.is_full:
            if not self.evict_oldest:
                raise BufferFullError(
                    "buffer is full; sample and clear before pushing again")
            self._items.pop(0)
        self._items.append(transition)
        return self.is_full

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform sample of ``n`` transitions without replacement."""
        if n < 0 or n > len(self._items):
            raise ValueError(f"cannot sample {n} of {len(self._items)} transitions")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]

    def clear(self) -> None:
        self._items.clear()


def select_action(q: np.ndarray, epsilon: float,
                  rng: np.random.Generator | None = None) -> Action:
    """Epsilon-greedy pick over (short, flat, long) values.

    Greedy ties resolve to the lowest action index. With ``epsilon == 0`` no
    random number is drawn, so ``rng`` may be omitted.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0.0:
        if rng is None:
            raise ValueError("epsilon > 0 requires an rng")
        if rng.random() < epsilon:
            return ACTION_ORDER[int(rng.integers(len(ACTION_ORDER)))]
    return ACTION_ORDER[int(np.argmax(q))]


def _td_target(transition: Transition, params: QNetParams, gamma: float,
               expert: bool) -> float:
    r = transition.r_e if expert else transition.r
    if transition.s_next is None:
        return r
    return r + gamma * float(np.max(qnet.forward(params, transition.s_next)))


def agent_loss(batch, params: QNetParams, gamma: float) -> float:
    """Mean squared TD-error of the agent's actions and rewards."""
    if not batch:
        raise ValueError("batch must be non-empty")
    total = 0.0
    for tr in batch:
        y = _td_target(tr, params, gamma, expert=False)
        q = qnet.forward(params, tr.s)[action_to_index(tr.a)]
        total += (y - float(q)) ** 2
    return total / len(batch)


def expert_loss(batch, params: QNetParams, gamma: float) -> float:
    """Mean squared TD-error of the demonstrator's actions and rewards."""
    if not batch:
        raise ValueError("batch must be non-empty")
    total = 0.0
    for tr in batch:
        y = _td_target(tr, params, gamma, expert=True)
        q = qnet.forward(params, tr.s)[action_to_index(tr.a_e)]
        total += (y - float(q)) ** 2
    return total / len(batch)


def total_loss(batch, params: QNetParams, gamma: float) -> float:
    """Average of the agent and expert TD losses."""
    return 0.5 * (agent_loss(batch, params, gamma) + expert_loss(batch, params, gamma))


def loss_and_gradient(batch, params: QNetParams, gamma: float,
                      agent_only: bool = False):
    """Vectorized losses and the gradient of the per-update objective.

    Targets are bootstrapped from the current parameters and treated as
    constants. Returns (loss_agent, loss_expert, grads); in ``agent_only``
    mode the expert terms are excluded from the objective and reported as NaN.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    n = len(batch)
    windows = np.stack([tr.s for tr in batch])
    q = qnet.forward_batch(params, windows)

    next_idx = [i for i, tr in enumerate(batch) if tr.s_next is not None]
    v_next = np.zeros(n)
    if next_idx:
        nq = qnet.forward_batch(params, np.stack([batch[i].s_next for i in next_idx]))
        v_next[next_idx] = nq.max(axis=1)

    rows = np.arange(n)
    a_idx = np.array([action_to_index(tr.a) for tr in batch])
    y_a = np.array([tr.r for tr in batch]) + gamma * v_next
    err_a = q[rows, a_idx] - y_a
    loss_a = float(np.mean(err_a ** 2))

    dq = np.zeros_like(q)
    if agent_only:
        loss_e = math.nan
        np.add.at(dq, (rows, a_idx), 2.0 * err_a / n)
    else:
        ae_idx = np.array([action_to_index(tr.a_e) for tr in batch])
        y_e = np.array([tr.r_e for tr in batch]) + gamma * v_next
        err_e = q[rows, ae_idx] - y_e
        loss_e = float(np.mean(err_e ** 2))
        np.add.at(dq, (rows, a_idx), err_a / n)
        np.add.at(dq, (rows, ae_idx), err_e / n)
    grads = qnet.backward(params, windows, dq)
    return loss_a, loss_e, grads


@dataclass(frozen=True)
class TrainConfig:
    episodes: int
    steps_per_episode: int
    buffer_capacity: int = 512
    batch_size: int = 64
    gamma: float = 0.992
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int | None = None  # default: half of the total steps
    learning_rate: float = 1e-3
    hidden_size: int = 64
    window_length: int = 20
    grad_clip: float = 5.0  # 0 disables clipping
    persistent_buffer: bool = False
    checkpoint_every: int = 0  # updates between checkpoints; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ValueError("episodes and steps_per_episode must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("batch_size and buffer_capacity must be >= 1")
        for e in (self.eps_start, self.eps_end):
            if not 0.0 <= e <= 1.0:
                raise ValueError("epsilon bounds must be in [0, 1]")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")
        if self.hidden_size < 1 or self.window_length < 1:
            raise ValueError("hidden_size and window_length must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def total_steps(self) -> int:
        return self.episodes * self.steps_per_episode

    def epsilon_at(self, global_step: int) -> float:
        """Linear decay from eps_start to eps_end, then flat at eps_end."""
        decay = self.eps_decay_steps
        if decay is None:
            decay = max(1, self.total_steps // 2)
        if global_step >= decay:
            return self.eps_end
        frac = global_step / decay
        return self.eps_start + (self.eps_end - self.eps_start) * frac


@dataclass
class TrainingLog:
    """Per-update loss records plus loop accounting for audits."""

    rows: list[tuple] = field(default_factory=list)
    steps_taken: int = 0
    final_buffer_size: int = 0
    updates_per_episode: list[int] = field(default_factory=list)

    @property
    def n_updates(self) -> int:
        return len(self.rows)

    def add(self, update_index: int, episode: int, epsilon: float,
            loss_agent: float, loss_expert: float, loss_total: float) -> None:
        self.rows.append((update_index, episode, epsilon,
                          loss_agent, loss_expert, loss_total))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(TRAINING_LOG_HEADER) + "\n")
            for u, ep, eps, la, le, lt in self.rows:
                fh.write(f"{u},{ep},{eps!r},{la!r},{le!r},{lt!r}\n")


class TrainingDivergedError(RuntimeError):
    """Loss or gradient became non-finite; carries the last good parameters."""

    def __init__(self, message: str, params: QNetParams, log: TrainingLog):
        super().__init__(message)
        self.params = params
        self.log = log


def train(config: TrainConfig, series: BarSeries, features: FeatureMatrix,
          trajectory: np.ndarray, checkpoint_dir=None) -> tuple[QNetParams, TrainingLog]:
    """Expert-guided training: constant rewards (agent 0, expert 1), dual TD loss."""
    return run_training_loop(config, series, features, trajectory,
                             reward_source="constant", agent_only=False,
                             mirror_expert=False, checkpoint_dir=checkpoint_dir)


def run_training_loop(config: TrainConfig, series: BarSeries,
                      features: FeatureMatrix, trajectory: np.ndarray | None,
                      reward_source: str, agent_only: bool, mirror_expert: bool,
                      cost_rate: float = 0.0,
                      checkpoint_dir=None) -> tuple[QNetParams, TrainingLog]:
    """Shared episode/fill/update/clear loop.

    ``reward_source`` is "constant" (agent 0 / expert 1) or "profit". Profit
    rewards are forward-aligned: the stored reward is the pnl the stored
    action earns to the next in-session close, minus its own turnover cost at
    the trade price. (The backward-looking per-step reward used in evaluation
    does not depend on the stored action at zero cost, so value learning
    needs the forward form.) Fully deterministic for a given config seed.
    """
    if reward_source not in ("constant", "profit"):
        raise ValueError("reward_source must be 'constant' or 'profit'")
    if trajectory is None:
        if not mirror_expert:
            raise ValueError("a trajectory is required unless mirroring the agent")
        trajectory = np.zeros(len(series), dtype=np.int8)
    if len(trajectory) != len(series):
        raise ValueError("trajectory must have one action per bar")

    env = TradingEnv(series, features, EnvConfig(reward_mode="training"),
                     config.window_length)
    closes = series.closes
    start = features.first_state_index(config.window_length)
    if start + config.steps_per_episode > len(series):
        raise ValueError(
            f"episode needs {config.steps_per_episode} bars from index {start} "
            f"but the series has {len(series)}")

    params = qnet.init(features.n_columns, config.hidden_size, config.seed)
    opt = qnet.init_optimizer(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    buffer = ReplayBuffer(config.buffer_capacity,
                          evict_oldest=config.persistent_buffer)
    log = TrainingLog()
    update_index = 0
    global_step = 0

    for episode in range(config.episodes):
        state = env.reset(start)
        t = 0
        while t < config.steps_per_episode:
            filled = 0
            while filled < config.buffer_capacity and t < config.steps_per_episode:
                epsilon = config.epsilon_at(global_step)
                q = qnet.forward(params, state)
                a = select_action(q, epsilon, rng)
                bar = env.cursor
                result = env.step(a)
                if reward_source == "profit":
                    held = int(env.position)  # after any forced close-out
                    pnl = 0.0
                    if not series.is_session_last(bar):
                        pnl = held * (closes[bar + 1] - closes[bar])
                    r = pnl - cost_rate * closes[bar] * abs(held - int(result.prev_action))
                else:
                    r = 0.0
                if mirror_expert:
                    a_e, r_e = int(a), r
                else:
                    a_e = int(trajectory[bar])
                    r_e = 1.0 if reward_source == "constant" else r
                buffer.push(Transition(
                    s=state, a=int(a), a_e=a_e, r=r, r_e=r_e,
                    s_next=None if result.done else result.next_state))
                state = result.next_state
                global_step += 1
                t += 1
                filled += 1

            n_sample = min(config.batch_size, len(buffer))
            if n_sample < config.batch_size:
                logger.info("update %d: sampling %d of a partially filled buffer",
                            update_index + 1, n_sample)
            batch = buffer.sample(n_sample, rng)
            loss_a, loss_e, grads = loss_and_gradient(
                batch, params, config.gamma, agent_only=agent_only)
            loss_t = loss_a if agent_only else 0.5 * (loss_a + loss_e)
            if not math.isfinite(loss_t):
                _maybe_checkpoint(checkpoint_dir, params, opt, update_index, force=True)
                raise TrainingDivergedError(
                    f"non-finite loss at update {update_index + 1}", params, log)
            if config.grad_clip:
                grads, _ = qnet.clip_gradients(grads, config.grad_clip)
            try:
                params, opt = qnet.adam_step(params, grads, opt)
            except qnet.NonFiniteGradientError:
                _maybe_checkpoint(checkpoint_dir, params, opt, update_index, force=True)
                raise TrainingDivergedError(
                    f"non-finite gradient at update {update_index + 1}", params, log)
            update_index += 1
            log.add(update_index, episode, config.epsilon_at(global_step),
                    loss_a, loss_e, loss_t)
            if not config.persistent_buffer:
                buffer.clear()
            if config.checkpoint_every and update_index % config.checkpoint_every == 0:
                _maybe_checkpoint(checkpoint_dir, params, opt, update_index)
        log.updates_per_episode.append(
            log.n_updates - sum(log.updates_per_episode))
    log.steps_taken = global_step
    log.final_buffer_size = len(buffer)
    return params, log


def _maybe_checkpoint(checkpoint_dir, params, opt, update_index, force=False):
    if checkpoint_dir is None:
        return
    path = Path(checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    name = "checkpoint_abort.json" if force else f"checkpoint_{update_index:06d}.json"
    qnet.save_checkpoint(path / name, params, opt,
                         meta={"update_index": update_index})
