"""Expert-guided deep Q-learning for intraday futures trading.

Submodules:

- ``bars``: OHLCV loading, validation, aggregation, synthetic series
- ``features``: rolling factor battery, normalization, state windows
- ``env``: the simulated market (unit positions, costs, day close-out)
- ``expert``: the greedy next-close demonstrator
- ``qnet``: LSTM + linear value head with hand-derived gradients and Adam
- ``training``: replay buffer, dual TD losses, the training loop
- ``baselines``: Buy & Hold, MACD, Dual Thrust, DQN, behavior cloning
- ``backtest``: stop-loss overlay, equity curves, profit/Sharpe/Sortino
- ``cli``: the ``expertq`` command-line driver
"""

from .bars import (Bar, BarSeries, SynthSpec, aggregate, load_bars, save_bars,
                   synth_series)
from .env import Action, EnvConfig, TradingEnv, step_reward
from .expert import expert_action, expert_trajectory
from .features import (FactorSpec, FeatureMatrix, build_state,
                       compute_features, default_factors, normalize)
from .qnet import QNetParams, adam_step, forward, gradient, init
from .training import ReplayBuffer, TrainConfig, Transition, select_action, train
from .baselines import (DualThrustParams, MacdParams, SignalSeries,
                        buy_and_hold, dual_thrust_signals, macd_signals,
                        train_bc, train_dqn)
from .backtest import (BacktestReport, GreedyPolicy, StopLossParams,
                       accumulated_profit, run_backtest, sharpe, sortino,
                       stop_loss_check)

__version__ = "0.1.0"

__all__ = [
    "Action", "Bar", "BarSeries", "BacktestReport", "DualThrustParams",
    "EnvConfig", "FactorSpec", "FeatureMatrix", "GreedyPolicy", "MacdParams",
    "QNetParams", "ReplayBuffer", "SignalSeries", "StopLossParams", "SynthSpec",
    "TradingEnv", "TrainConfig", "Transition", "accumulated_profit", "adam_step",
    "aggregate", "build_state", "buy_and_hold", "compute_features",
    "default_factors", "dual_thrust_signals", "expert_action",
    "expert_trajectory", "forward", "gradient", "init", "load_bars",
    "macd_signals", "normalize", "run_backtest", "save_bars", "select_action",
    "sharpe", "sortino", "step_reward", "stop_loss_check", "synth_series",
    "train", "train_bc", "train_dqn",
]
