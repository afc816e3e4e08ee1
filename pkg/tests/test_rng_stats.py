import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from pdmplab import stats as st
from pdmplab.rng import RngStream, as_generator, as_stream, mix64


def test_streams_are_reproducible():
    a = RngStream(7, 3).generator().random(5)
    b = RngStream(7, 3).generator().random(5)
    assert np.array_equal(a, b)


def test_substreams_differ():
    s = RngStream(7)
    draws = [x.generator().random() for x in s.substreams(20)]
    assert len(set(draws)) == 20


def test_replica_order_irrelevant():
    s = RngStream(99)
    forward = [sub.generator().random(3) for sub in s.substreams(5)]
    backward = [s.substream(i).generator().random(3) for i in reversed(range(5))][::-1]
    assert all(np.array_equal(a, b) for a, b in zip(forward, backward))


@given(hs.integers(0, 2**64 - 1), hs.integers(0, 2**64 - 1))
def test_mix64_range(a, b):
    assert 0 <= mix64(a, b) < 2**64


def test_seed_validation():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(2**64)
    with pytest.raises(TypeError):
        as_generator("seed")
    assert isinstance(as_stream(5), RngStream)


def test_estimate_and_z():
    e = st.estimate([1.0, 2.0, 3.0, 4.0])
    assert e.mean == 2.5
    assert math.isclose(e.se, math.sqrt(5 / 3 / 4))
    assert st.z_score(e, 2.5) == 0.0
    lo, hi = e.ci()
    assert lo < 2.5 < hi
    with pytest.raises(ValueError):
        st.fsum_mean([])


@settings(max_examples=30)
@given(hs.lists(hs.floats(-1e6, 1e6), min_size=2, max_size=50))
def test_mean_order_insensitive(xs):
    assert st.fsum_mean(xs) == st.fsum_mean(list(reversed(xs)))


def test_tv_and_trend():
    assert st.tv_distance([0.5, 0.5], [1.0, 0.0]) == 0.5
    assert st.non_increasing([3, 2, 2.05, 1], [0.1] * 4)
    assert not st.non_increasing([1, 2, 3], [0.01] * 3)
    t = st.decreasing_trend([1.0, 0.5, 0.1], [0.05] * 3)
    assert t["decreasing"] and t["p_value"] < 1e-6
    flat = st.decreasing_trend([0.1, 0.1, 0.1], [0.05] * 3)
    assert not flat["decreasing"]
