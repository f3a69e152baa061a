"""OHLCV bar series: CSV loading, validation, aggregation, and synthetic data.

A series is split into sessions (trading days) by UTC calendar-day changes in
the bar timestamps; session boundaries drive the day-trading close-out rule
used by the market environment and the backtester.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ("timestamp", "open", "high", "low", "close", "volume", "amount")

_SECONDS_PER_DAY = 86400


class BarCsvError(ValueError):
    """A bar CSV file could not be parsed; carries the 1-based row number."""

    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


class BarValidationError(ValueError):
    """A bar or bar series violates an OHLC, ordering, or spacing invariant."""


@dataclass(frozen=True)
class Bar:
    """One OHLCV+amount record. ``timestamp`` is epoch seconds, UTC."""

    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float
    amount: float

    def __post_init__(self):
        if min(self.open, self.high, self.low, self.close) <= 0:
            raise BarValidationError(
                f"bar at {self.timestamp}: prices must be positive")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise BarValidationError(
                f"bar at {self.timestamp}: high/low must envelope open/close "
                f"(o={self.open} h={self.high} l={self.low} c={self.close})")
        if self.volume < 0 or self.amount < 0:
            raise BarValidationError(
                f"bar at {self.timestamp}: volume and amount must be non-negative")


@dataclass
class BarSeries:
    """An ordered run of bars at a fixed frequency, partitioned into sessions.

    ``sessions`` holds half-open ``(start, stop)`` index ranges, one per UTC
    calendar day, in order and covering every bar. Within a session,
    consecutive timestamps differ by exactly ``frequency`` minutes.
    Instances are treated as immutable once constructed.
    """

    bars: tuple[Bar, ...]
    frequency: int
    sessions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        self.bars = tuple(self.bars)
        if not self.bars:
            raise BarValidationError("series must contain at least one bar")
        if int(self.frequency) < 1:
            raise ValueError(f"frequency must be >= 1 minute, got {self.frequency}")
        self.frequency = int(self.frequency)

        self.timestamps = np.array([b.timestamp for b in self.bars], dtype=np.int64)
        self.opens = np.array([b.open for b in self.bars], dtype=np.float64)
        self.highs = np.array([b.high for b in self.bars], dtype=np.float64)
        self.lows = np.array([b.low for b in self.bars], dtype=np.float64)
        self.closes = np.array([b.close for b in self.bars], dtype=np.float64)
        self.volumes = np.array([b.volume for b in self.bars], dtype=np.float64)
        self.amounts = np.array([b.amount for b in self.bars], dtype=np.float64)

        if not self.sessions:
            self.sessions = infer_sessions(self.timestamps)
        else:
            self.sessions = tuple((int(a), int(b)) for a, b in self.sessions)
        self._session_id = np.empty(len(self.bars), dtype=np.int64)
        for sid, (a, b) in enumerate(self.sessions):
            self._session_id[a:b] = sid
        self._validate()

    def _validate(self):
        ts = self.timestamps
        bad = np.flatnonzero(np.diff(ts) <= 0)
        if bad.size:
            i = int(bad[0]) + 1
            raise BarValidationError(
                f"timestamps not strictly increasing at index {i} "
                f"(t={int(ts[i])} follows t={int(ts[i - 1])})")
        cover = 0
        for a, b in self.sessions:
            if a != cover or b <= a:
                raise BarValidationError(f"session ranges must be ordered and cover all bars")
            cover = b
        if cover != len(self.bars):
            raise BarValidationError("session ranges must cover all bars")
        step = self.frequency * 60
        for a, b in self.sessions:
            gaps = np.flatnonzero(np.diff(ts[a:b]) != step)
            if gaps.size:
                i = a + int(gaps[0]) + 1
                raise BarValidationError(
                    f"bar at index {i} (t={int(ts[i])}) is not {self.frequency} min "
                    f"after its in-session predecessor")

    def __len__(self) -> int:
        return len(self.bars)

    def session_of(self, index: int) -> int:
        """Session id of the bar at ``index``."""
        return int(self._session_id[index])

    def session_range(self, index: int) -> tuple[int, int]:
        """Half-open index range of the session containing ``index``."""
        return self.sessions[self.session_of(index)]

    def is_session_last(self, index: int) -> bool:
        """True iff ``index`` is the final bar of its session."""
        return index == self.session_range(index)[1] - 1

    def session_last_indices(self) -> np.ndarray:
        return np.array([b - 1 for _, b in self.sessions], dtype=np.int64)

    def slice_by_time(self, start_ts: int, end_ts: int) -> "BarSeries":
        """Sub-series of bars with ``start_ts <= timestamp < end_ts``."""
        lo = int(np.searchsorted(self.timestamps, start_ts, side="left"))
        hi = int(np.searchsorted(self.timestamps, end_ts, side="left"))
        if hi <= lo:
            raise ValueError(
                f"time range [{start_ts}, {end_ts}) selects no bars")
        return BarSeries(self.bars[lo:hi], self.frequency)

    def index_at_or_after(self, ts: int) -> int:
        return int(np.searchsorted(self.timestamps, ts, side="left"))


def infer_sessions(timestamps: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Partition bar indices into sessions at UTC calendar-day changes."""
    days = np.asarray(timestamps, dtype=np.int64) // _SECONDS_PER_DAY
    breaks = np.flatnonzero(np.diff(days) != 0) + 1
    edges = [0, *breaks.tolist(), len(days)]
    return tuple((edges[i], edges[i + 1]) for i in range(len(edges) - 1))


def load_bars(path, frequency: int) -> BarSeries:
    """Load and validate a bar CSV (see ``CSV_HEADER`` for the column order).

    Sessions are inferred from calendar-day changes. Raises ``BarCsvError``
    for malformed rows (with the row number) and ``BarValidationError`` for
    OHLC, ordering, or spacing violations.
    """
    bars = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise BarCsvError(1, f"expected header {','.join(CSV_HEADER)}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise BarCsvError(rowno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                bar = Bar(
                    timestamp=int(row[0]),
                    open=float(row[1]),
                    high=float(row[2]),
                    low=float(row[3]),
                    close=float(row[4]),
                    volume=float(row[5]),
                    amount=float(row[6]),
                )
            except BarValidationError as exc:
                raise BarValidationError(f"row {rowno}: {exc}") from exc
            except ValueError as exc:
                raise BarCsvError(rowno, str(exc)) from exc
            bars.append(bar)
    if not bars:
        raise BarCsvError(2, "file contains no data rows")
    return BarSeries(tuple(bars), frequency)


def save_bars(series: BarSeries, path) -> None:
    """Write a series as CSV. Floats use ``repr`` so values round-trip exactly."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for b in series.bars:
            fh.write(f"{b.timestamp},{b.open!r},{b.high!r},{b.low!r},"
                     f"{b.close!r},{b.volume!r},{b.amount!r}\n")


def aggregate(series: BarSeries, target_frequency: int) -> BarSeries:
    """Aggregate to a coarser frequency without crossing session boundaries.

    Each output bar takes the first open, last close, max high, min low, and
    summed volume/amount of its group; its timestamp is the first constituent
    timestamp. A trailing partial group at a session end becomes a shorter bar.
    """
    target_frequency = int(target_frequency)
    if target_frequency <= 0 or target_frequency % series.frequency != 0:
        raise ValueError(
            f"target frequency {target_frequency} is not a positive multiple "
            f"of the series frequency {series.frequency}")
    m = target_frequency // series.frequency
    if m == 1:
        return series
    out = []
    for a, b in series.sessions:
        for g in range(a, b, m):
            chunk = series.bars[g:min(g + m, b)]
            out.append(Bar(
                timestamp=chunk[0].timestamp,
                open=chunk[0].open,
                high=max(c.high for c in chunk),
                low=min(c.low for c in chunk),
                close=chunk[-1].close,
                volume=math.fsum(c.volume for c in chunk),
                amount=math.fsum(c.amount for c in chunk),
            ))
    return BarSeries(tuple(out), target_frequency)


SYNTH_KINDS = ("sine", "trend", "random_walk", "regime_switch")

# 2010-01-04 00:00:00 UTC, a Monday; any midnight-aligned epoch works.
DEFAULT_START_TIMESTAMP = 1_262_563_200


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for a deterministic synthetic bar series.

    ``sine``: close[t] = base_price + amplitude * sin(2*pi*t / period).
    ``trend``: close[t] = base_price + drift * t.
    ``random_walk``: close steps by drift + volatility * N(0, 1).
    ``regime_switch``: like random_walk, but the drift sign flips every
    ``period`` bars.
    """

    kind: str
    length: int
    base_price: float = 100.0
    amplitude: float = 5.0
    period: int = 20
    drift: float = 0.0
    volatility: float = 0.0
    bars_per_day: int = 48
    frequency: int = 5
    start_timestamp: int = DEFAULT_START_TIMESTAMP

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"kind must be one of {SYNTH_KINDS}, got {self.kind!r}")
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.base_price <= 0:
            raise ValueError("base_price must be positive")
        if self.bars_per_day <= 0:
            raise ValueError("bars_per_day must be positive")
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.frequency < 1:
            raise ValueError("frequency must be >= 1 minute")
        if self.bars_per_day * self.frequency > 1440:
            raise ValueError("bars_per_day * frequency must fit inside one day")
        if self.volatility < 0:
            raise ValueError("volatility must be non-negative")


def synth_series(spec: SynthSpec, seed: int) -> BarSeries:
    """Generate a deterministic synthetic series for ``(spec, seed)``.

    Opens chain from the previous close within a session; each bar's high/low
    envelope its open and close exactly.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(spec.length, dtype=np.float64)
    if spec.kind == "sine":
        closes = spec.base_price + spec.amplitude * np.sin(2.0 * np.pi * t / spec.period)
    elif spec.kind == "trend":
        closes = spec.base_price + spec.drift * t
    elif spec.kind == "random_walk":
        steps = spec.drift + spec.volatility * rng.standard_normal(spec.length)
        closes = spec.base_price + np.cumsum(steps)
    else:  # regime_switch
        sign = 1.0 - 2.0 * ((np.arange(spec.length) // spec.period) % 2)
        steps = sign * spec.drift + spec.volatility * rng.standard_normal(spec.length)
        closes = spec.base_price + np.cumsum(steps)
    if np.min(closes) <= 0:
        raise ValueError(
            "synthetic close prices are not all positive; reduce amplitude/"
            "drift/volatility or raise base_price")
    volumes = rng.uniform(500.0, 1500.0, spec.length)

    day = np.arange(spec.length) // spec.bars_per_day
    slot = np.arange(spec.length) % spec.bars_per_day
    timestamps = spec.start_timestamp + day * _SECONDS_PER_DAY + slot * spec.frequency * 60

    bars = []
    for i in range(spec.length):
        o = closes[i - 1] if i > 0 and day[i] == day[i - 1] else closes[i]
        c = closes[i]
        bars.append(Bar(
            timestamp=int(timestamps[i]),
            open=float(o),
            high=float(max(o, c)),
            low=float(min(o, c)),
            close=float(c),
            volume=float(volumes[i]),
            amount=float(volumes[i] * c),
        ))
    return BarSeries(tuple(bars), spec.frequency)
