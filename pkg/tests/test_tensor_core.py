import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from streamkv.errors import NonFiniteInput, OddHeadDim, ShapeMismatch
from streamkv.tensor_core import (
    ModelShape, OpCounter, attention_cost, attention_scores, cosine_similarity,
    rope_apply, rope_remove, softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, width=32)


def test_softmax_examples():
    assert np.allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])
    assert np.allclose(softmax_rows([[123.4]]), [[1.0]])
    assert np.allclose(softmax_rows([[2.0, 0.0, -2.0]]), [[0.8668, 0.1173, 0.0159]], atol=1e-3)


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteInput):
        softmax_rows([[0.0, np.nan]])
    with pytest.raises(NonFiniteInput):
        softmax_rows([[np.inf, 0.0]])


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 20)), elements=finite))
def test_softmax_rows_normalised(x):
    y = softmax_rows(x)
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_attention_examples():
    assert np.allclose(attention_scores([[1.0, 0.0]], [[1.0, 0.0]]), [[1.0]])
    w = attention_scores([[2.0]], [[1.0], [0.0], [-1.0]], scale=False)
    assert np.allclose(w, [[0.8668, 0.1173, 0.0159]], atol=1e-3)
    w = attention_scores([[0.3, 1.0], [0.3, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(w[0], w[1])


def test_attention_scale_flag():
    q, k = np.array([[4.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    scaled = attention_scores(q, k, scale=True)
    raw = attention_scores(q, k, scale=False)
    assert np.allclose(scaled, softmax_rows([[4 / np.sqrt(2), 0.0]]))
    assert np.allclose(raw, softmax_rows([[4.0, 0.0]]))


def test_attention_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        attention_scores(np.ones((1, 3)), np.ones((2, 4)))


@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 5))
def test_attention_permutation_equivariant(seed, L, t):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((t, 8)).astype(np.float32)
    k = rng.standard_normal((L, 8)).astype(np.float32)
    perm = rng.permutation(L)
    assert np.allclose(attention_scores(q, k)[:, perm], attention_scores(q, k[perm]), atol=1e-6)


def test_rope_examples():
    k = np.random.default_rng(0).standard_normal((1, 8)).astype(np.float32)
    assert np.array_equal(rope_apply(k, [0]), k)
    assert np.allclose(rope_apply([[1.0, 0.0]], [1]), [[0.5403, 0.8415]], atol=1e-4)
    assert np.allclose(rope_remove([[0.5403, 0.8415]], [1]), [[1.0, 0.0]], atol=1e-3)
    assert np.allclose(rope_remove(rope_apply(k, [37]), [37]), k, atol=1e-5)
    assert np.array_equal(rope_remove(k, [0]), k)


def test_rope_rotate_half_pairing():
    # pair i couples dims i and i + d/2; frequency theta^(-2i/d)
    d, pos, theta = 4, 3, 100.0
    key = np.array([[1.0, 0.0, 0.0, 0.0]])
    out = rope_apply(key, [pos], theta)
    angle = pos * theta ** (-0.0)
    assert np.allclose(out, [[np.cos(angle), 0.0, np.sin(angle), 0.0]], atol=1e-6)
    key = np.array([[0.0, 1.0, 0.0, 0.0]])
    angle = pos * theta ** (-2 * 1 / d)
    assert np.allclose(rope_apply(key, [pos], theta), [[0.0, np.cos(angle), 0.0, np.sin(angle)]], atol=1e-6)


def test_rope_odd_dim():
    with pytest.raises(OddHeadDim):
        rope_apply(np.ones((1, 3)), [1])
    with pytest.raises(OddHeadDim):
        ModelShape(head_dim=63)


@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 4, 64, 128]), st.integers(1, 8))
def test_rope_inverse_and_norm(seed, d, n):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((n, d)).astype(np.float32)
    pos = rng.integers(0, 10**6, n)
    roped = rope_apply(k, pos)
    assert np.max(np.abs(rope_remove(roped, pos) - k)) <= 1e-5
    assert np.allclose(np.linalg.norm(roped, axis=1), np.linalg.norm(k, axis=1), atol=1e-5)


def test_rope_batched_heads_match_single():
    rng = np.random.default_rng(3)
    k = rng.standard_normal((3, 5, 16)).astype(np.float32)
    pos = np.array([0, 4, 9, 100, 7000])
    batched = rope_apply(k, pos)
    for h in range(3):
        assert np.array_equal(batched[h], rope_apply(k[h], pos))


def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)
    assert cosine_similarity([0, 0], [1, 0]) == 0.0
    with pytest.raises(ShapeMismatch):
        cosine_similarity([1, 0], [1, 0, 0])


def test_cost_counter():
    assert attention_cost(2, 3, 4, heads=5) == 5 * 2 * 3 * 5
    c = OpCounter()
    c.add("x", 3)
    c.add("x", 4)
    assert c["x"] == 7 and c["missing"] == 0
    assert c.as_dict() == {"x": 7}
