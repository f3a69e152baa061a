import numpy as np
import pytest

from expertq.bars import Bar, BarSeries

DAY = 86400
T0 = 1_262_563_200  # 2010-01-04 00:00 UTC


def make_bar(ts, close, open_=None, high=None, low=None, volume=100.0):
    o = close if open_ is None else open_
    h = max(o, close) if high is None else high
    l = min(o, close) if low is None else low
    return Bar(timestamp=ts, open=o, high=h, low=l, close=close,
               volume=volume, amount=volume * close)


def series_from_closes(closes, frequency=1, bars_per_day=None, start=T0):
    """Build a valid series from closes; opens chain within each session."""
    closes = list(closes)
    n = len(closes)
    bars_per_day = n if bars_per_day is None else bars_per_day
    bars = []
    for i, c in enumerate(closes):
        day, slot = divmod(i, bars_per_day)
        ts = start + day * DAY + slot * frequency * 60
        o = closes[i - 1] if i > 0 and slot > 0 else c
        bars.append(make_bar(ts, c, open_=o))
    return BarSeries(tuple(bars), frequency)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
