"""Spike detection on loss trajectories and robust cross-seed aggregation.

The spike rule is ratio-based against a trailing median, so it is invariant
to uniform positive scaling of the loss series; aggregation reports median
with the 25th/75th percentiles (linear interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SpikeRule:
    # Factor 2 separates burst-induced loss excursions from the ordinary
    # plateau oscillation of constant-step descent, which a 1.5x threshold
    # counts as spikes for every optimizer alike.
    window: int = 20
    factor: float = 2.0
    min_separation: int = 10

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("spike window must be >= 2")
        if self.factor <= 1.0:
            raise ValueError("spike factor must be > 1")
        if self.min_separation < 1:
            raise ValueError("min_separation must be >= 1")


@dataclass
class SpikeEvent:
    step: int  # onset index into the series
    peak: float


def detect_spikes(loss_series, rule: SpikeRule) -> list[SpikeEvent]:
    """Deterministic spike detection against a trailing median.

    Index t is a spike onset iff loss[t] > factor * median(loss[t-W..t-1])
    and at least ``min_separation`` indices passed since the previous onset.
    The event peak is the max loss until the series re-crosses the pre-spike
    median or ``min_separation`` elapses.
    """
    series = np.asarray(loss_series, dtype=np.float64)
    n = series.size
    if n <= rule.window:
        raise ValueError(
            f"series length {n} must exceed the window {rule.window}")
    events: list[SpikeEvent] = []
    last_onset = -rule.min_separation - 1
    for t in range(rule.window, n):
        if t - last_onset < rule.min_separation:
            continue
        trailing = np.median(series[t - rule.window:t])
        if series[t] > rule.factor * trailing:
            end = t
            while end + 1 < n and end + 1 - t < rule.min_separation \
                    and series[end + 1] > trailing:
                end += 1
            events.append(SpikeEvent(step=t, peak=float(series[t:end + 1].max())))
            last_onset = t
    return events


@dataclass
class RunSummary:
    spike_count: int
    spike_peak: Optional[float]  # None when no spikes detected
    final_loss: float
    diverged: bool


def summarize_run(loss_series, rule: SpikeRule, diverged: bool = False) -> RunSummary:
    """Spike statistics plus the mean loss over the last 5% of steps."""
    series = np.asarray(loss_series, dtype=np.float64)
    # A trajectory truncated by divergence can be shorter than the spike
    # window; there is nothing to detect on it.
    events = detect_spikes(series, rule) if series.size > rule.window else []
    tail = max(1, int(round(0.05 * series.size)))
    final_loss = float(np.mean(series[-tail:]))
    peak = max((e.peak for e in events), default=None)
    return RunSummary(spike_count=len(events), spike_peak=peak,
                      final_loss=final_loss, diverged=diverged)


@dataclass
class AggregateSummary:
    median: float
    iqr_low: float
    iqr_high: float
    n: int


def aggregate(values) -> AggregateSummary:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty value set")
    q25, q50, q75 = np.percentile(v, [25.0, 50.0, 75.0])
    return AggregateSummary(median=float(q50), iqr_low=float(q25),
                            iqr_high=float(q75), n=int(v.size))
