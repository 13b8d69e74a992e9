"""Core domain types: packet events, traces, labels, and seeded randomness.

Everything here is immutable after construction and safe to share between
threads. All real values are carried as 64-bit floats.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PacketEvent",
    "Trace",
    "LabelVector",
    "ScoreVector",
    "RngHandle",
    "validate_trace",
    "rng_fork",
]

OUT = 1
IN = -1


@dataclass(frozen=True)
class PacketEvent:
    """One observed packet: arrival time in seconds and direction (+1 out, -1 in)."""

    timestamp: float
    direction: int

    def __post_init__(self):
        t = float(self.timestamp)
        if not math.isfinite(t) or t < 0.0:
            raise ValueError(f"timestamp must be finite and >= 0, got {self.timestamp!r}")
        if self.direction not in (OUT, IN):
            raise ValueError(f"direction must be +1 or -1, got {self.direction!r}")
        object.__setattr__(self, "timestamp", t)
        object.__setattr__(self, "direction", int(self.direction))


@dataclass(frozen=True)
class Trace:
    """A time-sorted sequence of packet events, optionally tagged with its origin class."""

    events: tuple[PacketEvent, ...]
    origin_class: int | None = None

    def __post_init__(self):
        events = tuple(self.events)
        for a, b in zip(events, events[1:]):
            if b.timestamp < a.timestamp:
                raise ValueError("trace events must be sorted by non-decreasing timestamp")
        object.__setattr__(self, "events", events)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def duration(self) -> float:
        return self.events[-1].timestamp if self.events else 0.0

    def timestamps(self) -> np.ndarray:
        return np.array([e.timestamp for e in self.events], dtype=np.float64)

    def directions(self) -> np.ndarray:
        return np.array([e.direction for e in self.events], dtype=np.int64)


def validate_trace(events, origin_class: int | None = None) -> Trace:
    """Build a Trace from raw (possibly unsorted) events.

    Events are stably sorted by timestamp and then shifted so the first
    event sits at t = 0. Idempotent: a trace that is already sorted and
    zero-based passes through unchanged.
    """
    evts = [e if isinstance(e, PacketEvent) else PacketEvent(e[1], e[0]) for e in events]
    evts.sort(key=lambda e: e.timestamp)  # list.sort is stable
    if evts:
        t0 = evts[0].timestamp
        if t0 != 0.0:
            evts = [PacketEvent(e.timestamp - t0, e.direction) for e in evts]
    return Trace(tuple(evts), origin_class=origin_class)


@dataclass(frozen=True)
class LabelVector:
    """Multi-hot label over C website classes; single-tab labels have one active class."""

    num_classes: int
    active: frozenset[int]

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        active = frozenset(int(c) for c in self.active)
        if not active:
            raise ValueError("label must have at least one active class")
        if any(c < 0 or c >= self.num_classes for c in active):
            raise ValueError(f"active classes {sorted(active)} out of range [0, {self.num_classes})")
        object.__setattr__(self, "active", active)

    @property
    def cardinality(self) -> int:
        return len(self.active)

    def to_multi_hot(self) -> np.ndarray:
        y = np.zeros(self.num_classes, dtype=np.float64)
        y[sorted(self.active)] = 1.0
        return y


@dataclass(frozen=True)
class ScoreVector:
    """Raw classifier logits over C classes."""

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("scores must be one-dimensional")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class RngHandle:
    """Deterministic random stream identified by (seed, stream).

    The same handle always produces the same draw sequence (PCG64), and
    `rng_fork` derives independent child streams from text labels.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not (0 <= self.stream < 2**64):
            raise ValueError("stream must be a 64-bit unsigned integer")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this handle's stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(ss))


def rng_fork(parent: RngHandle, label: str) -> RngHandle:
    """Derive a child handle; distinct labels give independent streams."""
    h = hashlib.sha256()
    h.update(parent.seed.to_bytes(8, "little"))
    h.update(parent.stream.to_bytes(8, "little"))
    h.update(label.encode("utf-8"))
    digest = h.digest()
    seed = int.from_bytes(digest[:8], "little")
    stream = int.from_bytes(digest[8:16], "little")
    return RngHandle(seed=seed, stream=stream)
