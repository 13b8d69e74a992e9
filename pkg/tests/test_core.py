import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mgwf.core import (
    LabelVector,
    PacketEvent,
    RngHandle,
    ScoreVector,
    Trace,
    rng_fork,
    validate_trace,
)


class TestPacketEvent:
    def test_valid(self):
        e = PacketEvent(0.5, -1)
        assert e.timestamp == 0.5 and e.direction == -1

    @pytest.mark.parametrize("direction", [0, 2, -2, 5])
    def test_bad_direction(self, direction):
        with pytest.raises(ValueError):
            PacketEvent(0.0, direction)

    @pytest.mark.parametrize("ts", [float("nan"), float("inf"), -0.1])
    def test_bad_timestamp(self, ts):
        with pytest.raises(ValueError):
            PacketEvent(ts, 1)


class TestValidateTrace:
    def test_empty(self):
        tr = validate_trace([])
        assert len(tr) == 0 and tr.duration == 0.0

    def test_sort_then_shift(self):
        # input tuples are (direction, timestamp)
        tr = validate_trace([(-1, 0.4), (1, 0.1)])
        got = [(e.direction, e.timestamp) for e in tr.events]
        assert got[0] == (1, 0.0)
        assert got[1][0] == -1
        assert got[1][1] == pytest.approx(0.3, abs=1e-15)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            validate_trace([(1, float("nan"))])

    def test_stable_on_ties(self):
        tr = validate_trace([(1, 0.2), (-1, 0.2), (1, 0.2)])
        assert [e.direction for e in tr.events] == [1, -1, 1]

    @given(
        st.lists(
            st.tuples(st.sampled_from([1, -1]), st.floats(0, 100, allow_nan=False)),
            max_size=50,
        )
    )
    def test_idempotent(self, raw):
        once = validate_trace(raw)
        twice = validate_trace(once.events)
        assert once == twice

    def test_trace_rejects_unsorted(self):
        with pytest.raises(ValueError):
            Trace((PacketEvent(1.0, 1), PacketEvent(0.5, -1)))


class TestLabelVector:
    def test_multi_hot(self):
        y = LabelVector(num_classes=5, active=frozenset({1, 3}))
        assert y.cardinality == 2
        assert y.to_multi_hot().tolist() == [0, 1, 0, 1, 0]

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            LabelVector(num_classes=3, active=frozenset())

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            LabelVector(num_classes=3, active=frozenset({3}))


class TestScoreVector:
    def test_length_and_immutability(self):
        s = ScoreVector(np.array([1.0, 2.0]))
        assert len(s) == 2
        with pytest.raises(ValueError):
            s.scores[0] = 5.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ScoreVector(np.array([1.0, float("inf")]))


class TestRng:
    def test_same_handle_same_sequence(self):
        h = RngHandle(123, 4)
        a = h.generator().uniform(size=16)
        b = h.generator().uniform(size=16)
        assert np.array_equal(a, b)

    def test_fork_deterministic(self):
        s = RngHandle(99)
        assert rng_fork(s, "a") == rng_fork(s, "a")

    def test_fork_labels_independent(self):
        s = RngHandle(99)
        a = rng_fork(s, "a").generator().uniform(size=16)
        b = rng_fork(s, "b").generator().uniform(size=16)
        assert not np.array_equal(a, b)

    def test_fork_parents_independent(self):
        a = rng_fork(RngHandle(1), "x").generator().uniform(size=16)
        b = rng_fork(RngHandle(2), "x").generator().uniform(size=16)
        assert not np.array_equal(a, b)

    def test_rejects_out_of_range_seed(self):
        with pytest.raises(ValueError):
            RngHandle(-1)
        with pytest.raises(ValueError):
            RngHandle(2**64)
