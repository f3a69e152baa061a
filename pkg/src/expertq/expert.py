"""Greedy demonstrator: the retrospectively correct action at every bar.

The demonstration at bar t is long/short/flat by the direction of the next
in-session close. At each session's final bar it is flat, matching the
forced day-trading close-out.
"""

from __future__ import annotations

import numpy as np

from .bars import BarSeries
from .env import Action


class SessionBoundaryError(ValueError):
    """The requested bar has no next close within the same session."""


def expert_action(series: BarSeries, t: int) -> Action:
    """Correct action at bar ``t`` given the next in-session close.

    Raises ``SessionBoundaryError`` at the last bar of a session.
    """
    if series.is_session_last(t):
        raise SessionBoundaryError(
            f"bar {t} is the last of its session; no next close to compare")
    c0, c1 = series.closes[t], series.closes[t + 1]
    if c1 > c0:
        return Action.LONG
    if c1 < c0:
        return Action.SHORT
    return Action.FLAT


def expert_trajectory(series: BarSeries) -> np.ndarray:
    """Demonstration actions for every bar; 0 at each session's final step."""
    actions = np.zeros(len(series), dtype=np.int8)
    diffs = np.sign(np.diff(series.closes))
    actions[:-1] = diffs.astype(np.int8)
    actions[series.session_last_indices()] = 0
    return actions
