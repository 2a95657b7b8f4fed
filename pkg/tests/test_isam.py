import numpy as np
import pytest
from hypothesis import given, strategies as st

from abicmvdr.isam import attention_backward, attention_entropy, attention_weights


def test_zero_query_causal_rows():
    z = np.zeros((1, 3, 2))
    a = attention_weights(z, z, causal=True)[0]
    expected = np.array([[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]])
    assert np.allclose(a, expected, atol=1e-15)


def test_zero_query_noncausal_uniform():
    z = np.zeros((2, 5, 3))
    assert np.allclose(attention_weights(z, z, causal=False), 0.2)


def test_two_frame_softmax():
    q = np.array([[[1.0], [2.0]]])
    k = np.array([[[1.0], [0.0]]])
    a = attention_weights(q, k, causal=False)[0]
    assert a[1] == pytest.approx([0.8808, 0.1192], abs=1e-4)
    assert a[1, 0] == pytest.approx(1 / (1 + np.exp(-2)), abs=1e-15)


def test_errors():
    with pytest.raises(ValueError, match="mismatch"):
        attention_weights(np.zeros((1, 3, 2)), np.zeros((1, 4, 2)))
    with pytest.raises(ValueError):
        attention_weights(np.zeros((1, 0, 2)), np.zeros((1, 0, 2)))
    with pytest.raises(ValueError, match="cap"):
        attention_weights(np.zeros((1, 11, 1)), np.zeros((1, 11, 1)), causal=False, max_frames=10)
    # causal mode is not capped
    attention_weights(np.zeros((1, 11, 1)), np.zeros((1, 11, 1)), causal=True, max_frames=10)


def _qk(seed, f, t, d, scale=1.0):
    r = np.random.default_rng(seed)
    return scale * r.standard_normal((f, t, d)), scale * r.standard_normal((f, t, d))


@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 32), st.integers(1, 8), st.booleans())
def test_row_stochastic_and_causal_zeros(seed, f, t, d, causal):
    q, k = _qk(seed, f, t, d, scale=3.0)
    a = attention_weights(q, k, causal=causal)
    assert np.allclose(a.sum(-1), 1.0, atol=1e-6)
    assert np.all((a >= 0) & (a <= 1))
    if causal:
        assert np.all(a[:, np.triu_indices(t, 1)[0], np.triu_indices(t, 1)[1]] == 0.0)


@given(st.integers(0, 2**31 - 1), st.integers(2, 20), st.data())
def test_shift_consistency(seed, t, data):
    q, k = _qk(seed, 3, t, 4)
    cut = data.draw(st.integers(1, t))
    full = attention_weights(q, k, causal=True)
    part = attention_weights(q[:, :cut], k[:, :cut], causal=True)
    assert np.max(np.abs(full[:, :cut, :cut] - part)) <= 1e-12


@given(st.integers(0, 2**31 - 1))
def test_frequency_independence(seed):
    q, k = _qk(seed, 4, 6, 3)
    a = attention_weights(q, k)
    q2 = q.copy()
    q2[2] += 1.0
    b = attention_weights(q2, k)
    keep = [0, 1, 3]
    assert np.array_equal(a[keep], b[keep])


def test_large_logits_finite():
    q = np.full((1, 4, 1), 100.0)
    k = np.array([[[100.0], [-100.0], [50.0], [0.0]]])
    for causal in (True, False):
        a = attention_weights(q, k, causal=causal)
        assert np.all(np.isfinite(a))
        assert np.allclose(a.sum(-1), 1.0)


def test_backward_matches_finite_differences(rng):
    q, k = rng.standard_normal((2, 2, 5, 3))
    g = rng.standard_normal((2, 5, 5))
    for causal in (True, False):
        a = attention_weights(q, k, causal=causal)
        gq, gk = attention_backward(a, g, q, k)
        h = 1e-6
        for arr, grad in ((q, gq), (k, gk)):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                arr[idx] += h
                up = np.sum(g * attention_weights(q, k, causal=causal))
                arr[idx] -= 2 * h
                dn = np.sum(g * attention_weights(q, k, causal=causal))
                arr[idx] += h
                fd[idx] = (up - dn) / (2 * h)
            assert np.allclose(grad, fd, atol=1e-8)


def test_entropy():
    t = 4
    uniform = np.full((2, t, t), 1 / t)
    assert np.allclose(attention_entropy(uniform), np.log(t))
    assert np.allclose(attention_entropy(np.broadcast_to(np.eye(t), (2, t, t))), 0.0)
