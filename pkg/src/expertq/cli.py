"""Command-line front end: synth, train, backtest, and sweep.

Every command is reproducible byte-for-byte for a given config file and seed;
artifacts land in a run directory named by the config hash.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, qnet, training
from .backtest import GreedyPolicy, StopLossParams, run_backtest
from .bars import (BarCsvError, BarSeries, BarValidationError, SynthSpec,
                   SYNTH_KINDS, aggregate, load_bars, save_bars, synth_series)
from .config import (ConfigError, RULE_STRATEGIES, SUPPORTED_FREQUENCIES,
                     RunConfig, load_config, parse_factor_list)
from .expert import expert_trajectory
from .features import compute_features, normalize

logger = logging.getLogger(__name__)

SWEEP_PARAMETERS = ("stop_loss_k", "frequency")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expertq",
        description="Expert-guided Q-trading: data synthesis, training, "
                    "backtesting, and parameter sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write a deterministic synthetic bar CSV")
    p_synth.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    p_synth.add_argument("--length", type=int, required=True, help="bar count")
    p_synth.add_argument("--base-price", type=float, default=100.0)
    p_synth.add_argument("--amplitude", type=float, default=5.0)
    p_synth.add_argument("--period", type=int, default=20)
    p_synth.add_argument("--drift", type=float, default=0.0)
    p_synth.add_argument("--volatility", type=float, default=0.0)
    p_synth.add_argument("--bars-per-day", type=int, default=48)
    p_synth.add_argument("--frequency", type=int, default=5, help="bar minutes")
    p_synth.add_argument("--start-timestamp", type=int, default=None)
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--out", required=True)

    p_train = sub.add_parser("train", help="train the configured method")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--dump-features", action="store_true",
                         help="also write the training feature matrix as CSV")
    p_train.add_argument("--dump-expert", action="store_true",
                         help="also write the demonstration actions as CSV")

    p_bt = sub.add_parser("backtest", help="evaluate strategies on the test range")
    p_bt.add_argument("--config", required=True)
    p_bt.add_argument("--strategies", default=None,
                      help="comma list overriding the config's strategy set")
    p_bt.add_argument("--checkpoint", default=None,
                      help="checkpoint path for learned strategies "
                           "(default: the run directory's)")
    p_bt.add_argument("--dump-features", action="store_true")
    p_bt.add_argument("--dump-expert", action="store_true")

    p_sweep = sub.add_parser("sweep", help="backtest one strategy across a parameter")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--parameter", choices=SWEEP_PARAMETERS, required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma list, e.g. 5,15,25,35")
    return parser


def _load_frame(cfg: RunConfig):
    """Load source bars, aggregate to the trading frequency, build features."""
    series = load_bars(cfg.bars_path, cfg.source_frequency)
    series = aggregate(series, cfg.frequency)
    factors = parse_factor_list(cfg.factors)
    features = normalize(compute_features(series, factors), cfg.norm_window)
    return series, features


def _train_frame(cfg: RunConfig):
    full = load_bars(cfg.bars_path, cfg.source_frequency)
    sliced = full.slice_by_time(cfg.train_start, cfg.train_end)
    series = aggregate(sliced, cfg.frequency)
    factors = parse_factor_list(cfg.factors)
    features = normalize(compute_features(series, factors), cfg.norm_window)
    return series, features


def _checkpoint_path(cfg: RunConfig, method: str) -> Path:
    return cfg.run_dir / f"checkpoint_{method}.json"


def cmd_synth(args) -> int:
    kwargs = dict(kind=args.kind, length=args.length, base_price=args.base_price,
                  amplitude=args.amplitude, period=args.period, drift=args.drift,
                  volatility=args.volatility, bars_per_day=args.bars_per_day,
                  frequency=args.frequency)
    if args.start_timestamp is not None:
        kwargs["start_timestamp"] = args.start_timestamp
    series = synth_series(SynthSpec(**kwargs), args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bars(series, out)
    print(f"wrote {len(series)} bars to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    series, features = _train_frame(cfg)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)

    trajectory = expert_trajectory(series)
    if args.dump_features:
        features.to_csv(run_dir / "features.csv", timestamps=series.timestamps)
    if args.dump_expert:
        _write_expert_csv(run_dir / "expert.csv", series.timestamps, trajectory)

    method = cfg.method
    if method == "expert_td":
        params, log = training.train(cfg.train, series, features, trajectory,
                                     checkpoint_dir=run_dir)
    elif method == "dqn":
        params, log = baselines.train_dqn(cfg.train, series, features,
                                          cost_rate=cfg.env.cost_rate,
                                          checkpoint_dir=run_dir)
    else:
        params, log = baselines.train_bc(cfg.train, series, features, trajectory,
                                         checkpoint_dir=run_dir)

    qnet.save_checkpoint(
        _checkpoint_path(cfg, method), params,
        meta={"method": method, "window_length": cfg.window_length,
              "n_columns": features.n_columns})
    log.to_csv(run_dir / f"training_log_{method}.csv")
    final = log.rows[-1][5] if log.rows else float("nan")
    print(f"{method}: {log.n_updates} updates over {log.steps_taken} steps; "
          f"final loss {final:.6g}")
    print(f"artifacts in {run_dir}")
    return 0


def _write_expert_csv(path, timestamps, trajectory) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("timestamp,action\n")
        for ts, a in zip(timestamps, trajectory):
            fh.write(f"{int(ts)},{int(a)}\n")


def _resolve_policy(name: str, cfg: RunConfig, series: BarSeries,
                    checkpoint: str | None):
    """A policy object for a strategy name, on the given (possibly
    re-aggregated) series."""
    if name == "buy_and_hold":
        return baselines.buy_and_hold(series)
    if name == "macd":
        return baselines.macd_signals(series, cfg.macd)
    if name == "dual_thrust":
        return baselines.dual_thrust_signals(series, cfg.dual_thrust)
    path = Path(checkpoint) if checkpoint else _checkpoint_path(cfg, name)
    if not path.is_file():
        raise ConfigError(
            f"strategy {name!r} needs a checkpoint; none found at {path} "
            f"(run `expertq train` with method={name} first)")
    params, _, meta = qnet.load_checkpoint(path)
    window_length = int(meta.get("window_length", cfg.window_length))
    return GreedyPolicy(params, window_length, name=name)


def _test_range(cfg: RunConfig, series: BarSeries) -> tuple[int, int]:
    start = series.index_at_or_after(cfg.test_start)
    stop = series.index_at_or_after(cfg.test_end)
    if stop <= start:
        raise ConfigError("test range selects no bars")
    return start, stop - 1


def cmd_backtest(args) -> int:
    cfg = load_config(args.config)
    series, features = _load_frame(cfg)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)

    if args.dump_features:
        features.to_csv(run_dir / "features.csv", timestamps=series.timestamps)
    if args.dump_expert:
        _write_expert_csv(run_dir / "expert.csv", series.timestamps,
                          expert_trajectory(series))

    names = cfg.strategies
    if args.strategies:
        names = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
        for s in names:
            if s not in RULE_STRATEGIES and s not in ("expert_td", "dqn", "bc"):
                raise ConfigError(f"unknown strategy {s!r}")
    if not names:
        raise ConfigError("no strategies requested")

    start, end = _test_range(cfg, series)
    echo = cfg.echo()
    for name in names:
        policy = _resolve_policy(name, cfg, series, args.checkpoint)
        report = run_backtest(policy, series, features, cfg.env, cfg.stop_loss,
                              start=start, end=end, config_echo=echo)
        report.save_json(run_dir / f"report_{name}.json")
        report.save_equity_csv(run_dir / f"equity_{name}.csv")
        if name in RULE_STRATEGIES:
            policy.to_csv(run_dir / f"signals_{name}.csv", series.timestamps)
        print(f"{name}: profit {report.profit:.4f}, sharpe {report.sharpe:.4f}, "
              f"sortino {report.sortino:.4f}, trades {report.trade_count}, "
              f"stops {report.stop_loss_trigger_count}")
    print(f"reports in {run_dir}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep requires at least one value")
    try:
        values = [int(v) for v in values]
    except ValueError:
        raise ConfigError(f"sweep values must be integers, got {args.values!r}")

    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    strategy = cfg.sweep_strategy
    rows = []
    if args.parameter == "stop_loss_k":
        series, features = _load_frame(cfg)
        start, end = _test_range(cfg, series)
        policy = _resolve_policy(strategy, cfg, series, None)
        for v in values:
            stop = StopLossParams(k=v, enabled=True)
            report = run_backtest(policy, series, features, cfg.env, stop,
                                  start=start, end=end)
            rows.append((v, report.profit, report.sharpe, report.sortino))
    else:  # frequency
        source = load_bars(cfg.bars_path, cfg.source_frequency)
        factors = parse_factor_list(cfg.factors)
        for v in values:
            if v not in SUPPORTED_FREQUENCIES:
                raise ConfigError(
                    f"frequency {v} not in supported set {SUPPORTED_FREQUENCIES}")
            series = aggregate(source, v)
            features = normalize(compute_features(series, factors), cfg.norm_window)
            start, end = _test_range(cfg, series)
            policy = _resolve_policy(strategy, cfg, series, None)
            report = run_backtest(policy, series, features, cfg.env, cfg.stop_loss,
                                  start=start, end=end)
            rows.append((v, report.profit, report.sharpe, report.sortino))

    out = run_dir / f"sweep_{args.parameter}.csv"
    with open(out, "w", newline="") as fh:
        fh.write("value,profit,sharpe,sortino\n")
        for v, profit, sh, so in rows:
            fh.write(f"{v},{profit!r},{sh!r},{so!r}\n")
    for v, profit, sh, so in rows:
        print(f"{args.parameter}={v}: profit {profit:.4f}, "
              f"sharpe {sh:.4f}, sortino {so:.4f}")
    print(f"table written to {out}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    handler = {"synth": cmd_synth, "train": cmd_train,
               "backtest": cmd_backtest, "sweep": cmd_sweep}[args.command]
    try:
        return handler(args)
    except (ConfigError, BarCsvError, BarValidationError, ValueError,
            OSError, training.TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
