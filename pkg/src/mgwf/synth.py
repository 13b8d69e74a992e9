"""Synthetic labeled traffic: per-site burst profiles, multi-tab mixing, padding.

Sites are modeled as short request/response burst schedules. Each burst is a
list of signed run lengths (+k means k outgoing packets in a row, -k means k
incoming), emitted with a per-site nominal packet gap and inter-burst gap,
plus bounded uniform timing jitter. The first burst embeds a run length that
grows with the class id, so no two classes share a run-length signature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import IN, OUT, LabelVector, PacketEvent, RngHandle, Trace, rng_fork, validate_trace

__all__ = [
    "SiteProfile",
    "FrontParams",
    "gen_site_profile",
    "gen_trace",
    "mix_tabs",
    "front_pad",
]


@dataclass(frozen=True)
class SiteProfile:
    """Deterministic burst-level description of one website's traffic shape."""

    class_id: int
    bursts: tuple[tuple[int, ...], ...]  # per burst: signed run lengths
    packet_gap: float                    # seconds between packets in a run
    inter_burst_gap: float               # seconds between bursts
    jitter: float                        # max |uniform| timestamp perturbation

    def __post_init__(self):
        if len(self.bursts) < 1:
            raise ValueError("profile needs at least one burst")
        if any(r == 0 for burst in self.bursts for r in burst):
            raise ValueError("run lengths must be non-zero")
        if self.packet_gap <= 0 or self.inter_burst_gap <= 0 or self.jitter < 0:
            raise ValueError("gaps must be positive and jitter non-negative")

    @property
    def burst_count(self) -> int:
        return len(self.bursts)

    @property
    def total_packets(self) -> int:
        return sum(abs(r) for burst in self.bursts for r in burst)


@dataclass(frozen=True)
class FrontParams:
    """Knobs for the dummy-packet padding defense."""

    max_client_dummies: int = 120
    max_server_dummies: int = 120
    window_min: float = 0.5
    window_max: float = 2.0

    def __post_init__(self):
        if self.max_client_dummies < 0 or self.max_server_dummies < 0:
            raise ValueError("dummy maxima must be >= 0")
        if not (0 < self.window_min <= self.window_max):
            raise ValueError("need 0 < window_min <= window_max")


def gen_site_profile(class_id: int, rng: RngHandle) -> SiteProfile:
    """Build the deterministic profile for one class.

    Regeneration from the same (class_id, rng) is bit-identical. Distinct
    class ids always differ: the first burst's incoming run length is
    8 + class_id.
    """
    if class_id < 0:
        raise ValueError("class_id must be >= 0")
    g = rng_fork(rng, f"site/{class_id}").generator()

    burst_count = 5 + (class_id % 4) + int(g.integers(0, 2))
    base_out = 2 + (class_id * 3) % 5
    base_in = 4 + (class_id * 5) % 9

    bursts: list[tuple[int, ...]] = []
    # Signature burst: incoming run length encodes the class id directly.
    bursts.append((OUT * (2 + class_id % 3), IN * (8 + class_id)))
    for _ in range(burst_count - 1):
        out_run = base_out + int(g.integers(0, 3))
        in_run = base_in + int(g.integers(0, 4))
        tail_in = 2 + int(g.integers(0, 3))
        bursts.append((OUT * out_run, IN * in_run, OUT * 1, IN * tail_in))

    packet_gap = 0.002 + 0.0006 * (class_id % 7) + float(g.uniform(0.0, 0.0004))
    inter_burst_gap = 0.08 + 0.025 * (class_id % 5) + float(g.uniform(0.0, 0.01))
    jitter = 0.25 * packet_gap

    return SiteProfile(
        class_id=class_id,
        bursts=tuple(bursts),
        packet_gap=packet_gap,
        inter_burst_gap=inter_burst_gap,
        jitter=jitter,
    )


def _nominal_schedule(profile: SiteProfile) -> tuple[np.ndarray, np.ndarray]:
    times: list[float] = []
    dirs: list[int] = []
    t = 0.0
    for burst in profile.bursts:
        for run in burst:
            direction = OUT if run > 0 else IN
            for _ in range(abs(run)):
                times.append(t)
                dirs.append(direction)
                t += profile.packet_gap
            t += 2.0 * profile.packet_gap  # brief pause between runs
        t += profile.inter_burst_gap
    return np.array(times, dtype=np.float64), np.array(dirs, dtype=np.int64)


def gen_trace(profile: SiteProfile, rng: RngHandle) -> Trace:
    """Emit one jittered instance of the profile, sorted and starting at t = 0."""
    times, dirs = _nominal_schedule(profile)
    g = rng.generator()
    if profile.jitter > 0:
        times = times + g.uniform(-profile.jitter, profile.jitter, size=times.size)
    order = np.argsort(times, kind="stable")
    times = times[order]
    dirs = dirs[order]
    times -= times[0]
    events = tuple(PacketEvent(float(t), int(d)) for t, d in zip(times, dirs))
    return Trace(events, origin_class=profile.class_id)


def mix_tabs(traces, offsets, num_classes: int) -> tuple[Trace, LabelVector]:
    """Overlay per-tab traces at the given start offsets into one mixed trace.

    Ties across tabs keep input tab order. The label is the multi-hot union
    of the tabs' origin classes, which must be pairwise distinct.
    """
    traces = list(traces)
    offsets = [float(o) for o in offsets]
    if len(traces) != len(offsets) or not traces:
        raise ValueError("need equally many traces and offsets, at least one each")
    if any(not math.isfinite(o) or o < 0 for o in offsets):
        raise ValueError("offsets must be finite and >= 0")
    classes = []
    for tr in traces:
        if tr.origin_class is None:
            raise ValueError("mix_tabs needs traces with a known origin class")
        if not (0 <= tr.origin_class < num_classes):
            raise ValueError(f"origin class {tr.origin_class} out of range [0, {num_classes})")
        classes.append(tr.origin_class)
    if len(set(classes)) != len(classes):
        raise ValueError("tabs must come from pairwise distinct websites")

    merged = [
        PacketEvent(e.timestamp + off, e.direction)
        for tr, off in zip(traces, offsets)
        for e in tr.events
    ]
    merged.sort(key=lambda e: e.timestamp)  # stable: equal times keep tab order
    label = LabelVector(num_classes=num_classes, active=frozenset(classes))
    return Trace(tuple(merged)), label


def front_pad(trace: Trace, params: FrontParams, rng: RngHandle) -> Trace:
    """Inject dummy packets with Rayleigh-distributed timestamps.

    Draws the client/server dummy counts uniformly up to their maxima and a
    Rayleigh scale uniformly from [window_min, window_max]; dummy times are
    clipped to the span of the original trace, so the original events stay a
    subsequence of the padded output.
    """
    if len(trace) == 0:
        raise ValueError("cannot pad an empty trace")
    g = rng.generator()
    n_client = int(g.integers(0, params.max_client_dummies + 1))
    n_server = int(g.integers(0, params.max_server_dummies + 1))
    scale = float(g.uniform(params.window_min, params.window_max))
    duration = trace.duration

    dummy_times = np.clip(g.rayleigh(scale=scale, size=n_client + n_server), 0.0, duration)
    dummy_dirs = np.concatenate(
        [np.full(n_client, OUT, dtype=np.int64), np.full(n_server, IN, dtype=np.int64)]
    )

    merged = list(trace.events) + [
        PacketEvent(float(t), int(d)) for t, d in zip(dummy_times, dummy_dirs)
    ]
    merged.sort(key=lambda e: e.timestamp)
    return Trace(tuple(merged), origin_class=trace.origin_class)
