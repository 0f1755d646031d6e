import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamkv.errors import EmptyCache, ShapeMismatch, StaleIndex
from streamkv.kv_cache import LayerCache
from streamkv.par import (
    RetrievalConfig, assemble_context, build_page_index, retrieve, score_pages,
    selected_page_count, top_pages,
)
from streamkv.tensor_core import OpCounter, attention_cost, rope_apply

from helpers import make_cache


def test_page_partition_examples():
    assert [len(p.token_indices) for p in build_page_index(make_cache(4), 2).pages] == [2, 2]
    assert [len(p.token_indices) for p in build_page_index(make_cache(5), 2).pages] == [2, 2, 1]


@given(st.integers(1, 40), st.integers(1, 9))
def test_pages_cover_cache_in_order(n, C):
    index = build_page_index(make_cache(n), C)
    assert len(index) == -(-n // C)
    assert [i for p in index.pages for i in p.token_indices] == list(range(n))


def test_mean_key_of_identical_deroped_keys():
    k = np.random.default_rng(0).standard_normal((2, 8)).astype(np.float32)
    positions = np.array([3, 10, 400])
    roped = rope_apply(np.repeat(k[:, None], 3, axis=1), positions)
    cache = LayerCache(2, 8, 8).append_arrays(roped, roped, positions)
    index = build_page_index(cache, 3)
    assert np.allclose(index.pages[0].mean_key, k, atol=1e-5)
    assert index.pages[0].first_position == 3 and index.pages[0].last_position == 400


def test_roped_index_keeps_stored_keys():
    cache = make_cache(4, positions=[1, 5, 6, 9])
    index = build_page_index(cache, 4, deroped=False)
    assert np.allclose(index.mean_keys[:, 0], cache.keys.mean(axis=1), atol=1e-6)


def test_empty_cache():
    with pytest.raises(EmptyCache):
        build_page_index(LayerCache(1, 4, 4), 2)


def test_score_pages_examples():
    one = build_page_index(make_cache(3), 4)
    assert np.allclose(score_pages(np.ones((2, 1, 8)), one), [1.0])
    cache = LayerCache(1, 2, 4).append_arrays([[[1.0, 0.0], [-1.0, 0.0]]], [[[0, 0], [0, 0]]], [0, 0 + 1])
    index = build_page_index(cache, 1, deroped=False)
    index.mean_keys = np.array([[[1.0, 0.0], [-1.0, 0.0]]], dtype=np.float32)
    assert np.allclose(score_pages(np.array([[[1.0, 0.0]]]), index, scale=False), [0.8808, 0.1192], atol=1e-3)


def test_score_pages_duplicates_and_normalisation():
    cache = make_cache(6, seed=3)
    index = build_page_index(cache, 2)
    index.mean_keys[:, 2] = index.mean_keys[:, 0]
    q = np.random.default_rng(1).standard_normal((2, 3, 8))
    s = score_pages(q, index)
    assert s[0] == pytest.approx(s[2])
    assert s.sum() == pytest.approx(1.0, abs=1e-6)


def test_score_pages_shape_mismatch_and_cost():
    index = build_page_index(make_cache(6), 2)
    with pytest.raises(ShapeMismatch):
        score_pages(np.ones((3, 1, 8)), index)
    counter = OpCounter()
    score_pages(np.ones((2, 5, 8)), index, counter=counter)
    assert counter["page_scoring"] == attention_cost(5, 3, 8, 2)


def test_retrieve_examples():
    index = build_page_index(make_cache(10), 2)
    scores = np.array([0.1, 0.3, 0.2, 0.25, 0.15])
    assert [p.page_id for p in retrieve(index, scores, 1.0)] == [0, 1, 2, 3, 4]
    assert len(retrieve(index, scores, 0.4)) == 2
    small = build_page_index(make_cache(6), 2)
    assert [p.page_id for p in retrieve(small, np.array([0.1, 0.6, 0.3]), 0.67)] == [1, 2]
    assert selected_page_count(2, 0.4) == 1
    assert selected_page_count(1, 0.01) == 1
    assert selected_page_count(10, 0.3) == 3


def test_top_pages_tie_goes_to_earlier():
    assert top_pages([0.2, 0.4, 0.4, 0.4], 2) == [1, 2]


def test_assemble_examples():
    cache = make_cache(6, positions=[0, 2, 4, 6, 9, 11])
    index = build_page_index(cache, 2)
    ctx = assemble_context(index.pages, cache, 0)
    assert ctx.positions.tolist() == cache.positions.tolist()
    assert np.array_equal(ctx.keys, cache.keys)
    assert assemble_context([], cache, 2).positions.tolist() == [9, 11]
    # page {4, 6} plus a window covering {6, 9, 11}
    ctx = assemble_context([index.pages[1]], cache, 3)
    assert ctx.positions.tolist() == [4, 6, 9, 11]


def test_stale_index_detected():
    cache = make_cache(6)
    index = build_page_index(cache, 2)
    index.check_fresh(cache)
    cache.retain({0, 1, 2})
    with pytest.raises(StaleIndex):
        index.check_fresh(cache)


def test_retrieval_config_bounds():
    with pytest.raises(ValueError):
        RetrievalConfig(retrieval_ratio=0.0)
    with pytest.raises(ValueError):
        RetrievalConfig(page_size_C=0)
