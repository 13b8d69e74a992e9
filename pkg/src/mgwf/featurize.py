"""Slot-based trace featurization.

A trace is binned into L = ceil(T / dt) time slots of width dt. Each slot
contributes a 6-value column:

    row 0  c+   outgoing packet count
    row 1  c-   incoming packet count
    row 2  n+-  adjacent out->in direction flips inside the slot
    row 3  n-+  adjacent in->out direction flips inside the slot
    row 4  s+-  mean time gap over the out->in flips (0 when there are none)
    row 5  s-+  mean time gap over the in->out flips (0 when there are none)

Flips are counted only between consecutive packets of the same slot; pairs
straddling a slot boundary are ignored. Packets at or beyond T are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Trace

__all__ = [
    "FeatureMatrix",
    "FeatureChannelMask",
    "NUM_CHANNELS",
    "slot_index",
    "slot_count",
    "featurize",
]

NUM_CHANNELS = 6

# Row indices by channel group.
ROWS_COUNTS = (0, 1)
ROWS_TRANSITIONS = (2, 3)
ROWS_INTERVALS = (4, 5)


@dataclass(frozen=True)
class FeatureMatrix:
    """6 x L slot-statistics matrix together with the slotting parameters."""

    values: np.ndarray
    slot_seconds: float
    max_seconds: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != NUM_CHANNELS:
            raise ValueError(f"expected a {NUM_CHANNELS} x L matrix, got shape {v.shape}")
        expected_l = slot_count(self.max_seconds, self.slot_seconds)
        if v.shape[1] != expected_l:
            raise ValueError(f"expected L={expected_l} columns for T={self.max_seconds}, dt={self.slot_seconds}; got {v.shape[1]}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def num_slots(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureChannelMask:
    """Selects which channel groups stay active; masked rows are zeroed, shape is kept."""

    include_counts: bool = True
    include_transitions: bool = True
    include_intervals: bool = True

    def __post_init__(self):
        if not (self.include_counts or self.include_transitions or self.include_intervals):
            raise ValueError("at least one feature channel group must be enabled")

    def zeroed_rows(self) -> tuple[int, ...]:
        rows: list[int] = []
        if not self.include_counts:
            rows.extend(ROWS_COUNTS)
        if not self.include_transitions:
            rows.extend(ROWS_TRANSITIONS)
        if not self.include_intervals:
            rows.extend(ROWS_INTERVALS)
        return tuple(rows)


def slot_index(t: float, slot_seconds: float) -> int:
    """1-based slot j with (j-1)*dt <= t < j*dt."""
    if slot_seconds <= 0:
        raise ValueError("slot width must be positive")
    if t < 0:
        raise ValueError("time must be non-negative")
    return int(t / slot_seconds) + 1


def slot_count(max_seconds: float, slot_seconds: float) -> int:
    """L = ceil(T / dt), guarded against float quotients a hair above an integer."""
    if slot_seconds <= 0 or max_seconds <= 0:
        raise ValueError("slot width and max time must be positive")
    q = max_seconds / slot_seconds
    nearest = round(q)
    if nearest > 0 and abs(q - nearest) <= 1e-9 * max(1.0, abs(q)):
        return int(nearest)
    return int(math.ceil(q))


def featurize(
    trace: Trace,
    slot_seconds: float,
    max_seconds: float,
    mask: FeatureChannelMask | None = None,
) -> FeatureMatrix:
    """Compute the 6 x L slot-feature matrix for one trace."""
    num_slots = slot_count(max_seconds, slot_seconds)
    m = np.zeros((NUM_CHANNELS, num_slots), dtype=np.float64)

    if len(trace) > 0:
        times = trace.timestamps()
        dirs = trace.directions()
        keep = times < max_seconds
        times = times[keep]
        dirs = dirs[keep]

    if len(trace) > 0 and times.size > 0:
        slots = (times / slot_seconds).astype(np.int64)  # 0-based here
        slots = np.minimum(slots, num_slots - 1)

        m[0] = np.bincount(slots[dirs > 0], minlength=num_slots)
        m[1] = np.bincount(slots[dirs < 0], minlength=num_slots)

        if times.size > 1:
            same_slot = slots[:-1] == slots[1:]
            gaps = times[1:] - times[:-1]
            out_in = same_slot & (dirs[:-1] > 0) & (dirs[1:] < 0)
            in_out = same_slot & (dirs[:-1] < 0) & (dirs[1:] > 0)
            for row_n, row_s, sel in ((2, 4, out_in), (3, 5, in_out)):
                if np.any(sel):
                    counts = np.bincount(slots[:-1][sel], minlength=num_slots)
                    sums = np.bincount(slots[:-1][sel], weights=gaps[sel], minlength=num_slots)
                    m[row_n] = counts
                    np.divide(sums, counts, out=m[row_s], where=counts > 0)

    if mask is not None:
        for row in mask.zeroed_rows():
            m[row] = 0.0

    return FeatureMatrix(values=m, slot_seconds=float(slot_seconds), max_seconds=float(max_seconds))
