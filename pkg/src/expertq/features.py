"""Rolling factor features over bar series, plus normalization and state windows.

A feature matrix holds one row per bar: the six raw bar fields followed by a
battery of rolling factors (returns, momentum, volatility, range statistics,
EMA spreads, skewness, ...). Every kernel looks only at bars at or before its
row, so feature values never change when later bars are appended. Rows whose
lookbacks are not yet filled are masked invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bars import BarSeries

RAW_COLUMNS = ("open", "high", "low", "close", "volume", "amount")

DEFAULT_FACTOR_WINDOWS = (3, 5, 10, 20)


class StateUnavailableError(Exception):
    """Not enough valid history to build a state window at the requested bar."""


@dataclass(frozen=True)
class FactorSpec:
    """A named factor: a kernel (formula id) applied at one lookback window."""

    name: str
    kernel: str
    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"factor {self.name!r}: window must be >= 1")
        if self.kernel not in FACTOR_KERNELS:
            raise ValueError(
                f"factor {self.name!r}: unknown kernel {self.kernel!r}; "
                f"known kernels: {sorted(FACTOR_KERNELS)}")


@dataclass
class FeatureMatrix:
    """Per-bar feature rows with a validity mask.

    ``values`` is (n_bars, n_columns) float64; ``valid[t]`` is False while any
    factor's lookback ending at ``t`` is unfilled. Invalid rows hold zeros.
    """

    values: np.ndarray
    valid: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.columns = tuple(self.columns)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ValueError("values must be (n_rows, n_columns)")
        if self.valid.shape != (self.values.shape[0],):
            raise ValueError("valid mask must have one entry per row")
        if np.any(~np.isfinite(self.values[self.valid])):
            raise ValueError("valid rows must not contain non-finite values")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def first_valid(self) -> int:
        """Index of the first valid row; raises if no row is valid."""
        idx = np.flatnonzero(self.valid)
        if idx.size == 0:
            raise StateUnavailableError("matrix has no valid rows")
        return int(idx[0])

    def first_state_index(self, window_length: int) -> int:
        """Earliest bar index at which a length-``window_length`` state exists."""
        return self.first_valid() + window_length - 1

    def to_csv(self, path, timestamps=None) -> None:
        with open(path, "w", newline="") as fh:
            head = ["valid", *self.columns]
            if timestamps is not None:
                head.insert(0, "timestamp")
            fh.write(",".join(head) + "\n")
            for i in range(self.n_rows):
                cells = [str(int(self.valid[i]))]
                cells += [repr(float(v)) for v in self.values[i]]
                if timestamps is not None:
                    cells.insert(0, str(int(timestamps[i])))
                fh.write(",".join(cells) + "\n")


def ema(x: np.ndarray, span: int) -> np.ndarray:
    """Exponential moving average with smoothing 2/(span+1), seeded at x[0]."""
    if span < 1:
        raise ValueError("span must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    if x.size == 0:
        return out
    out[0] = x[0]
    for i in range(1, x.size):
        out[i] = out[i - 1] + alpha * (x[i] - out[i - 1])
    return out


def _windows(a: np.ndarray, w: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(a, w)


def _roll_reduce(a: np.ndarray, w: int, fn) -> tuple[np.ndarray, int]:
    """Apply ``fn`` over trailing windows of width ``w``; valid from w-1."""
    out = np.zeros(a.size)
    out[w - 1:] = fn(_windows(a, w))
    return out, w - 1


def _pop_std(win: np.ndarray) -> np.ndarray:
    return win.std(axis=1)


def _k_return(s, w):
    out = np.zeros(len(s))
    out[w:] = s.closes[w:] / s.closes[:-w] - 1.0
    return out, w


def _k_log_return(s, w):
    out = np.zeros(len(s))
    out[w:] = np.log(s.closes[w:] / s.closes[:-w])
    return out, w


def _momentum(s, w):
    out = np.zeros(len(s))
    out[w:] = s.closes[w:] - s.closes[:-w]
    return out, w


def _volatility(s, w):
    # population std of the last w one-bar returns
    r = s.closes[1:] / s.closes[:-1] - 1.0
    out = np.zeros(len(s))
    out[w:] = _pop_std(_windows(r, w))
    return out, w


def _roll_mean(s, w):
    return _roll_reduce(s.closes, w, lambda win: win.mean(axis=1))


def _roll_max(s, w):
    return _roll_reduce(s.closes, w, lambda win: win.max(axis=1))


def _roll_min(s, w):
    return _roll_reduce(s.closes, w, lambda win: win.min(axis=1))


def _volume_zscore(s, w):
    out = np.zeros(len(s))
    win = _windows(s.volumes, w)
    mu = win.mean(axis=1)
    sd = _pop_std(win)
    z = np.where(sd > 0, (s.volumes[w - 1:] - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    out[w - 1:] = z
    return out, w - 1


def _range_ratio(s, w):
    out = np.zeros(len(s))
    hh = _windows(s.highs, w).max(axis=1)
    ll = _windows(s.lows, w).min(axis=1)
    out[w - 1:] = (hh - ll) / s.closes[w - 1:]
    return out, w - 1


def _close_position(s, w):
    # where the close sits inside the rolling high/low range; 0.5 if flat
    out = np.zeros(len(s))
    hh = _windows(s.highs, w).max(axis=1)
    ll = _windows(s.lows, w).min(axis=1)
    rng = hh - ll
    pos = np.where(rng > 0, (s.closes[w - 1:] - ll) / np.where(rng > 0, rng, 1.0), 0.5)
    out[w - 1:] = pos
    return out, w - 1


def _ema_spread(s, w):
    # fast-minus-slow EMA spread; causal from the first bar
    return ema(s.closes, w) - ema(s.closes, 2 * w), 0


def _skewness(s, w):
    out = np.zeros(len(s))
    win = _windows(s.closes, w)
    centered = win - win.mean(axis=1, keepdims=True)
    m2 = (centered ** 2).mean(axis=1)
    m3 = (centered ** 3).mean(axis=1)
    out[w - 1:] = np.where(m2 > 0, m3 / np.where(m2 > 0, m2, 1.0) ** 1.5, 0.0)
    return out, w - 1


FACTOR_KERNELS = {
    "return": _k_return,
    "log_return": _k_log_return,
    "momentum": _momentum,
    "volatility": _volatility,
    "roll_mean": _roll_mean,
    "roll_max": _roll_max,
    "roll_min": _roll_min,
    "volume_zscore": _volume_zscore,
    "range_ratio": _range_ratio,
    "close_position": _close_position,
    "ema_spread": _ema_spread,
    "skewness": _skewness,
}


def default_factors(windows=DEFAULT_FACTOR_WINDOWS) -> tuple[FactorSpec, ...]:
    """The standard battery: every kernel at every window."""
    return tuple(
        FactorSpec(name=f"{kernel}_{w}", kernel=kernel, window=w)
        for kernel in FACTOR_KERNELS
        for w in windows
    )


def compute_features(series: BarSeries, factors) -> FeatureMatrix:
    """Evaluate raw columns plus every factor; mask rows with unfilled lookbacks."""
    factors = tuple(factors)
    names = [f.name for f in factors]
    if len(set(names)) != len(names):
        raise ValueError("factor names must be unique")
    n = len(series)
    for f in factors:
        if f.window > n:
            raise ValueError(
                f"factor {f.name!r}: window {f.window} exceeds series length {n}")

    columns = list(RAW_COLUMNS) + names
    values = np.zeros((n, len(columns)))
    values[:, 0] = series.opens
    values[:, 1] = series.highs
    values[:, 2] = series.lows
    values[:, 3] = series.closes
    values[:, 4] = series.volumes
    values[:, 5] = series.amounts

    warmup = 0
    for j, f in enumerate(factors):
        col, first = FACTOR_KERNELS[f.kernel](series, f.window)
        values[:, len(RAW_COLUMNS) + j] = col
        warmup = max(warmup, first)

    valid = np.zeros(n, dtype=bool)
    valid[warmup:] = True
    values[~valid] = 0.0
    return FeatureMatrix(values=values, valid=valid, columns=tuple(columns))


def normalize(matrix: FeatureMatrix, norm_window: int) -> FeatureMatrix:
    """Rolling z-score of every column over the trailing ``norm_window`` valid rows.

    Uses population standard deviation; a window with zero spread (all values
    equal) maps to 0. Output is clipped to [-10, 10]. The validity mask is
    unchanged; until ``norm_window`` valid rows exist, the shorter available
    window is used.
    """
    if norm_window < 2:
        raise ValueError("norm_window must be >= 2")
    vs = np.flatnonzero(matrix.valid)
    out = np.zeros_like(matrix.values)
    if vs.size:
        sub = matrix.values[vs]
        for j in range(vs.size):
            lo = max(0, j - norm_window + 1)
            seg = sub[lo:j + 1]
            mu = seg.mean(axis=0)
            sd = seg.std(axis=0)
            # exact constancy check: rounding can leave sd ~1 ulp above zero
            spread = ~(seg == seg[0]).all(axis=0) & (sd > 0)
            z = np.where(spread, (sub[j] - mu) / np.where(sd > 0, sd, 1.0), 0.0)
            out[vs[j]] = np.clip(z, -10.0, 10.0)
    return FeatureMatrix(values=out, valid=matrix.valid.copy(), columns=matrix.columns)


def build_state(matrix: FeatureMatrix, t: int, window_length: int) -> np.ndarray:
    """The (window_length, n_columns) state ending at bar ``t``, oldest row first.

    Raises ``StateUnavailableError`` when the window would reach before the
    start of the matrix or cover an invalid row; callers skip such ``t``.
    """
    if window_length < 1:
        raise ValueError("window_length must be >= 1")
    lo = t - window_length + 1
    if lo < 0 or t >= matrix.n_rows:
        raise StateUnavailableError(
            f"state window [{lo}, {t}] falls outside the matrix")
    if not matrix.valid[lo:t + 1].all():
        raise StateUnavailableError(
            f"state window [{lo}, {t}] covers rows without filled lookbacks")
    return matrix.values[lo:t + 1].copy()
