import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamkv.errors import IndexOutOfRange, PositionOrderViolation, ShapeMismatch
from streamkv.kv_cache import LayerCache, append_tokens, retain_indices

from helpers import make_cache, record


def test_append_preserves_order():
    cache = append_tokens(LayerCache(2, 8, 4), [record(0), record(3), record(5)])
    assert len(cache) == 3
    assert cache.positions.tolist() == [0, 3, 5]


def test_append_rejects_stale_position():
    cache = make_cache(3)
    with pytest.raises(PositionOrderViolation):
        append_tokens(cache, [record(2)])
    with pytest.raises(PositionOrderViolation):
        append_tokens(cache, [record(7), record(6)])


def test_over_budget_append_is_allowed():
    cache = make_cache(4, budget=4)
    append_tokens(cache, [record(10), record(11)])
    assert len(cache) == 6


def test_append_shape_check():
    cache = LayerCache(2, 8, 4)
    with pytest.raises(ShapeMismatch):
        cache.append_arrays(np.zeros((2, 1, 4)), np.zeros((2, 1, 4)), [0])


def test_retain_examples():
    cache = make_cache(4)
    before = cache.copy()
    retain_indices(cache, range(4))
    assert np.array_equal(cache.keys, before.keys) and np.array_equal(cache.positions, before.positions)
    assert retain_indices(cache.copy(), set()).positions.tolist() == []
    assert retain_indices(cache, {0, 2}).positions.tolist() == [0, 2]
    assert np.array_equal(cache.keys, before.keys[:, [0, 2]])


def test_retain_out_of_range():
    with pytest.raises(IndexOutOfRange):
        retain_indices(make_cache(3), {3})
    with pytest.raises(IndexOutOfRange):
        retain_indices(make_cache(3), {-1})


def test_records_round_trip():
    cache = make_cache(3)
    clone = LayerCache(2, 8, 4).append(cache.records)
    assert np.array_equal(clone.keys, cache.keys)
    assert clone.positions.tolist() == [0, 1, 2]
    assert all(r.score == 0.0 for r in clone.records)


def test_version_bumps_on_mutation():
    cache = make_cache(3)
    v = cache.version
    cache.retain({0})
    assert cache.version == v + 1


@given(st.lists(st.integers(1, 5), min_size=1, max_size=10), st.data())
def test_retain_never_reorders(gaps, data):
    positions = np.cumsum(gaps)
    cache = make_cache(len(positions), positions=positions)
    keep = data.draw(st.sets(st.integers(0, len(positions) - 1)))
    cache.retain(keep)
    cache.check_invariants()
    assert cache.positions.tolist() == [int(positions[i]) for i in sorted(keep)]
