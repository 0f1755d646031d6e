import numpy as np
import pytest
from hypothesis import given, strategies as st

from streamkv.errors import EmptyAnswerSet, EmptyCache, KTooLarge, KZero
from streamkv.kv_cache import LayerCache
from streamkv.metrics import (
    coverage, intra_page_similarity, oracle_answer_tokens, oracle_page_scores, recall,
    recall_at_k, retention_ratio,
)

from streamkv.tensor_core import rope_apply

from helpers import make_cache


def test_oracle_answer_examples():
    rng = np.random.default_rng(0)
    keys = rng.standard_normal((2, 2, 10, 8)).astype(np.float32)
    q = rng.standard_normal((2, 2, 3, 8)).astype(np.float32)
    assert oracle_answer_tokens(keys, q, [10, 11, 12], 10) == [set(range(10))] * 2
    assert oracle_answer_tokens(keys, q, [10, 11, 12], 3) == oracle_answer_tokens(keys, q, [10, 11, 12], 3)
    with pytest.raises(KTooLarge):
        oracle_answer_tokens(keys, q, [10, 11, 12], 11)


def test_retention_examples():
    assert retention_ratio([{1, 2, 3, 4, 9}], [{1, 2, 3, 4}]) == [1.0]
    assert retention_ratio([{5}], [{1, 2}]) == [0.0]
    assert retention_ratio([{2, 4, 9}], [{1, 2, 3, 4}]) == [0.5]
    with pytest.raises(EmptyAnswerSet):
        retention_ratio([{1}], [set()])


def test_oracle_page_scores_examples():
    assert oracle_page_scores(np.ones((2, 1, 8)), [9], make_cache(3), 4).tolist() == pytest.approx([1.0])
    # identical raw keys at position 0 -> uniform token weights
    cache = LayerCache(1, 4, 8).append_arrays(np.ones((1, 5, 4)), np.ones((1, 5, 4)), np.arange(5))
    cache.keys[:] = 1.0
    s = oracle_page_scores(np.ones((1, 1, 4)), [0], cache, 2, theta=1e30)
    assert s.tolist() == pytest.approx([0.4, 0.4, 0.2])
    with pytest.raises(EmptyCache):
        oracle_page_scores(np.ones((1, 1, 4)), [0], LayerCache(1, 4, 8), 2)


def test_recall_examples():
    assert recall_at_k({1, 2, 3}, {1, 2, 3}) == 1.0
    assert recall_at_k({1, 2}, {3, 4}) == 0.0
    assert recall_at_k({1, 2, 3, 9}, {1, 2, 3, 4}) == 0.75
    with pytest.raises(KZero):
        recall_at_k(set(), set())
    with pytest.raises(ValueError):
        recall_at_k({1}, {1, 2})
    assert recall({1, 2, 3, 4, 5}, {1, 2}) == 1.0


def test_coverage_examples():
    assert coverage({0, 2, 4, 6}, 8, 4) == 4
    assert coverage({0, 1}, 8, 4) == 1
    assert coverage({0, 2, 4, 7}, 8, 4) == 4
    assert coverage({0, 2, 3, 7}, 8, 4) == 3


@given(st.sets(st.integers(0, 30)), st.sets(st.integers(0, 30)), st.sets(st.integers(0, 30), min_size=1))
def test_metrics_monotone_in_superset(a, extra, target):
    assert recall(a | extra, target) >= recall(a, target)
    assert retention_ratio([a | extra], [target])[0] >= retention_ratio([a], [target])[0]


def test_intra_page_similarity_identical_deroped():
    k = np.random.default_rng(0).standard_normal((2, 1, 8))
    pos = np.array([0, 7, 30, 31])
    roped = rope_apply(np.repeat(k, 4, axis=1), pos)
    cache = LayerCache(2, 8, 8).append_arrays(roped, roped, pos)
    assert intra_page_similarity(cache, 4, deroped=True) == pytest.approx(1.0, abs=1e-5)
    assert intra_page_similarity(cache, 4, deroped=False) < 1.0
