"""Run configuration: a sectioned key-value file, parsed fail-closed.

Unknown sections or keys are rejected so a typo can never silently fall back
to a default. Every effective value (defaults included) is echoed into run
outputs via ``RunConfig.echo()``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .baselines import DualThrustParams, MacdParams
from .env import DEFAULT_COST_RATE, EnvConfig
from .backtest import StopLossParams
from .training import TrainConfig

SUPPORTED_FREQUENCIES = (1, 2, 3, 5, 10, 15, 30, 60)

TRAIN_METHODS = ("expert_td", "dqn", "bc")
RULE_STRATEGIES = ("buy_and_hold", "macd", "dual_thrust")
ALL_STRATEGIES = TRAIN_METHODS + RULE_STRATEGIES

_SCHEMA = {
    "data": ("bars", "source_frequency", "frequency", "train_start",
             "train_end", "test_start", "test_end", "out_dir"),
    "features": ("norm_window", "window_length", "factors"),
    "env": ("cost_rate", "force_flat_at_session_end"),
    "train": ("method", "episodes", "steps_per_episode", "buffer_capacity",
              "batch_size", "gamma", "eps_start", "eps_end", "eps_decay_steps",
              "learning_rate", "hidden_size", "grad_clip", "persistent_buffer",
              "checkpoint_every", "seed"),
    "stop_loss": ("k", "enabled"),
    "backtest": ("strategies", "sweep_strategy"),
    "macd": ("short_period", "long_period", "dea_period"),
    "dual_thrust": ("window", "k1", "k2"),
}


class ConfigError(ValueError):
    """The configuration file is missing, malformed, or contains unknown keys."""


@dataclass
class RunConfig:
    bars_path: str
    source_frequency: int
    frequency: int
    train_start: int
    train_end: int
    test_start: int
    test_end: int
    out_dir: str
    norm_window: int
    window_length: int
    factors: str
    env: EnvConfig
    train: TrainConfig
    method: str
    stop_loss: StopLossParams
    strategies: tuple[str, ...]
    sweep_strategy: str
    macd: MacdParams
    dual_thrust: DualThrustParams
    config_hash: str

    def echo(self) -> dict:
        """Every effective setting, defaults included, for report embedding."""
        return {
            "data": {
                "bars": self.bars_path,
                "source_frequency": self.source_frequency,
                "frequency": self.frequency,
                "train_start": self.train_start,
                "train_end": self.train_end,
                "test_start": self.test_start,
                "test_end": self.test_end,
                "out_dir": self.out_dir,
            },
            "features": {
                "norm_window": self.norm_window,
                "window_length": self.window_length,
                "factors": self.factors,
            },
            "env": {
                "cost_rate": self.env.cost_rate,
                "force_flat_at_session_end": self.env.force_flat_at_session_end,
            },
            "train": {
                "method": self.method,
                "episodes": self.train.episodes,
                "steps_per_episode": self.train.steps_per_episode,
                "buffer_capacity": self.train.buffer_capacity,
                "batch_size": self.train.batch_size,
                "gamma": self.train.gamma,
                "eps_start": self.train.eps_start,
                "eps_end": self.train.eps_end,
                "eps_decay_steps": self.train.eps_decay_steps,
                "learning_rate": self.train.learning_rate,
                "hidden_size": self.train.hidden_size,
                "window_length": self.train.window_length,
                "grad_clip": self.train.grad_clip,
                "persistent_buffer": self.train.persistent_buffer,
                "checkpoint_every": self.train.checkpoint_every,
                "seed": self.train.seed,
            },
            "stop_loss": {"k": self.stop_loss.k, "enabled": self.stop_loss.enabled},
            "backtest": {
                "strategies": list(self.strategies),
                "sweep_strategy": self.sweep_strategy,
            },
            "macd": {
                "short_period": self.macd.short_period,
                "long_period": self.macd.long_period,
                "dea_period": self.macd.dea_period,
            },
            "dual_thrust": {
                "window": self.dual_thrust.window,
                "k1": self.dual_thrust.k1,
                "k2": self.dual_thrust.k2,
            },
        }

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.config_hash


class _Section:
    """One config section with typed getters that track consumed keys."""

    def __init__(self, name, raw):
        self.name = name
        self.raw = dict(raw)

    def _fetch(self, key, default):
        value = self.raw.get(key, "")
        if value == "":
            return default
        return value

    def get_str(self, key, default=None, choices=None):
        value = self._fetch(key, default)
        if value is None:
            raise ConfigError(f"[{self.name}] {key} is required")
        value = str(value)
        if choices and value not in choices:
            raise ConfigError(
                f"[{self.name}] {key}={value!r} not in {sorted(choices)}")
        return value

    def get_int(self, key, default=None, optional=False):
        value = self._fetch(key, default)
        if value is None:
            if optional:
                return None
            raise ConfigError(f"[{self.name}] {key} is required")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"[{self.name}] {key}={value!r} is not an integer")

    def get_float(self, key, default=None):
        value = self._fetch(key, default)
        if value is None:
            raise ConfigError(f"[{self.name}] {key} is required")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"[{self.name}] {key}={value!r} is not a number")

    def get_bool(self, key, default):
        value = self._fetch(key, default)
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key}={value!r} is not a boolean")


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_bytes()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text.decode("utf-8"), source=str(path))
    except (UnicodeDecodeError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")

    def section(name):
        return _Section(name, parser[name] if parser.has_section(name) else {})

    data = section("data")
    feats = section("features")
    env_s = section("env")
    train_s = section("train")
    stop_s = section("stop_loss")
    bt = section("backtest")
    macd_s = section("macd")
    dt = section("dual_thrust")

    source_frequency = data.get_int("source_frequency", 1)
    frequency = data.get_int("frequency", 5)
    if frequency not in SUPPORTED_FREQUENCIES:
        raise ConfigError(
            f"[data] frequency={frequency} not in supported set {SUPPORTED_FREQUENCIES}")
    train_start = data.get_int("train_start")
    train_end = data.get_int("train_end")
    test_start = data.get_int("test_start")
    test_end = data.get_int("test_end")
    if not (train_start < train_end <= test_start < test_end):
        raise ConfigError(
            "[data] ranges must satisfy train_start < train_end <= "
            "test_start < test_end (train strictly earlier, disjoint)")

    window_length = feats.get_int("window_length", 20)
    env_cfg = EnvConfig(
        cost_rate=env_s.get_float("cost_rate", DEFAULT_COST_RATE),
        reward_mode="testing",
        force_flat_at_session_end=env_s.get_bool("force_flat_at_session_end", True),
    )
    try:
        train_cfg = TrainConfig(
            episodes=train_s.get_int("episodes", 1),
            steps_per_episode=train_s.get_int("steps_per_episode", 256),
            buffer_capacity=train_s.get_int("buffer_capacity", 512),
            batch_size=train_s.get_int("batch_size", 64),
            gamma=train_s.get_float("gamma", 0.992),
            eps_start=train_s.get_float("eps_start", 1.0),
            eps_end=train_s.get_float("eps_end", 0.05),
            eps_decay_steps=train_s.get_int("eps_decay_steps", None, optional=True),
            learning_rate=train_s.get_float("learning_rate", 1e-3),
            hidden_size=train_s.get_int("hidden_size", 64),
            window_length=window_length,
            grad_clip=train_s.get_float("grad_clip", 5.0),
            persistent_buffer=train_s.get_bool("persistent_buffer", False),
            checkpoint_every=train_s.get_int("checkpoint_every", 0),
            seed=train_s.get_int("seed", 0),
        )
        stop = StopLossParams(k=stop_s.get_int("k", 25),
                              enabled=stop_s.get_bool("enabled", True))
        macd_p = MacdParams(short_period=macd_s.get_int("short_period", 12),
                            long_period=macd_s.get_int("long_period", 26),
                            dea_period=macd_s.get_int("dea_period", 9))
        dt_p = DualThrustParams(window=dt.get_int("window", None, optional=True),
                                k1=dt.get_float("k1", 0.5), k2=dt.get_float("k2", 0.5))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    strategies = tuple(
        s.strip() for s in bt.get_str("strategies", "expert_td").split(",") if s.strip())
    for s in strategies:
        if s not in ALL_STRATEGIES:
            raise ConfigError(
                f"[backtest] unknown strategy {s!r}; known: {sorted(ALL_STRATEGIES)}")
    sweep_strategy = bt.get_str("sweep_strategy", "macd", choices=ALL_STRATEGIES)

    return RunConfig(
        bars_path=data.get_str("bars"),
        source_frequency=source_frequency,
        frequency=frequency,
        train_start=train_start,
        train_end=train_end,
        test_start=test_start,
        test_end=test_end,
        out_dir=data.get_str("out_dir", "runs"),
        norm_window=feats.get_int("norm_window", 64),
        window_length=window_length,
        factors=feats.get_str("factors", "default"),
        env=env_cfg,
        train=train_cfg,
        method=train_s.get_str("method", "expert_td", choices=TRAIN_METHODS),
        stop_loss=stop,
        strategies=strategies,
        sweep_strategy=sweep_strategy,
        macd=macd_p,
        dual_thrust=dt_p,
        config_hash=hashlib.sha256(text).hexdigest()[:12],
    )


def parse_factor_list(spec_text: str):
    """Parse the ``factors`` setting: ``default`` or ``kernel:window,...``."""
    from .features import FactorSpec, default_factors

    text = spec_text.strip()
    if text == "default":
        return default_factors()
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(
                f"factor {part!r} must be written kernel:window (e.g. momentum:5)")
        kernel, _, window = part.partition(":")
        try:
            w = int(window)
        except ValueError:
            raise ConfigError(f"factor {part!r}: window must be an integer")
        try:
            specs.append(FactorSpec(name=f"{kernel}_{w}", kernel=kernel, window=w))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not specs:
        raise ConfigError("factors list is empty")
    return tuple(specs)
