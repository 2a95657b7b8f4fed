import numpy as np
import pytest
from hypothesis import given, strategies as st

from abicmvdr.scm import (
    EstimatorConfig, attention_scm, attention_scm_backward, blockwise_scm, estimate_scm, exponential_attention,
    instantaneous_scm, online_scm, outer_products,
)


def _scalar_seq(values):
    return np.asarray(values, dtype=complex)[None, :, None, None]


def _random_spec(r, m, f, t):
    return r.standard_normal((m, f, t)) + 1j * r.standard_normal((m, f, t))


def _double_loop(a, psi):
    f, t = a.shape[:2]
    out = np.zeros_like(psi)
    for fi in range(f):
        for ti in range(t):
            for tau in range(t):
                out[fi, ti] += a[fi, ti, tau] * psi[fi, tau]
    return out


def test_iscm_outer_product_example():
    y = np.array([1, 1j]).reshape(2, 1, 1)
    s = instantaneous_scm(y, np.ones((1, 1)), "speech")[0, 0]
    assert np.array_equal(s, np.array([[1, -1j], [1j, 1]]))


def test_iscm_zero_mask(rng):
    y = _random_spec(rng, 3, 2, 4)
    assert not np.any(instantaneous_scm(y, np.zeros((2, 4)), "speech"))
    assert np.array_equal(instantaneous_scm(y, np.zeros((2, 4)), "noise"), outer_products(np.moveaxis(y, 0, -1)))


def test_iscm_rejects_bad_mask(rng):
    y = _random_spec(rng, 2, 2, 2)
    with pytest.raises(ValueError):
        instantaneous_scm(y, np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        instantaneous_scm(y, np.zeros((3, 2)))


def test_attention_identity_and_running_mean(rng):
    psi = instantaneous_scm(_random_spec(rng, 2, 3, 5), rng.uniform(size=(3, 5)))
    eye = np.broadcast_to(np.eye(5), (3, 5, 5))
    assert np.allclose(attention_scm(eye, psi), psi, atol=0)
    rows = np.tril(np.ones((5, 5)))
    rows /= rows.sum(1, keepdims=True)
    running = np.cumsum(psi, axis=1) / np.arange(1, 6)[None, :, None, None]
    assert np.allclose(attention_scm(np.broadcast_to(rows, (3, 5, 5)), psi), running, atol=1e-14)


def test_attention_double_loop_tiny(rng):
    a = rng.uniform(size=(1, 3, 3))
    a /= a.sum(-1, keepdims=True)
    psi = instantaneous_scm(_random_spec(rng, 2, 1, 3), rng.uniform(size=(1, 3)))
    assert np.max(np.abs(attention_scm(a, psi) - _double_loop(a, psi))) <= 1e-12


def test_attention_backward_fd(rng):
    a = rng.uniform(size=(2, 4, 4))
    psi = instantaneous_scm(_random_spec(rng, 2, 2, 4), rng.uniform(size=(2, 4)))
    g = rng.standard_normal(psi.shape) + 1j * rng.standard_normal(psi.shape)
    g_a, g_psi = attention_scm_backward(a, psi, g)
    # L = Re <g, Phi>; dL/dA is real, dL/dPsi in the Re + i Im convention
    loss = lambda a_, p_: np.sum((np.conj(g) * attention_scm(a_, p_)).real)
    h = 1e-6
    for idx in [(0, 1, 2), (1, 3, 0)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        assert g_a[idx] == pytest.approx((loss(ap, psi) - loss(am, psi)) / (2 * h), abs=1e-7)
    idx = (1, 2, 0, 1)
    for unit, part in ((1.0, "real"), (1j, "imag")):
        pp, pm = psi.copy(), psi.copy()
        pp[idx] += unit * h
        pm[idx] -= unit * h
        fd = (loss(a, pp) - loss(a, pm)) / (2 * h)
        assert getattr(g_psi[idx], part) == pytest.approx(fd, abs=1e-7)


def test_online_examples():
    assert np.allclose(online_scm(_scalar_seq([1, 3]), 0.5).ravel(), [1, 2])
    const = _scalar_seq(np.full(7, 2.5))
    assert np.allclose(online_scm(const, 0.9), const)
    seq = _scalar_seq(np.r_[np.zeros(200), np.ones(200)])
    phi = online_scm(seq, 0.995).ravel().real
    assert phi[399] == pytest.approx(1 - 0.995 ** 200, abs=1e-12)
    assert phi[399] == pytest.approx(0.633, abs=1e-3)


def test_blockwise_examples():
    seq = _scalar_seq([1, 3, 5, 7])
    assert np.allclose(blockwise_scm(seq, 2).ravel(), [2, 2, 6, 6])
    assert np.allclose(blockwise_scm(seq, 2, causal=True).ravel(), [1, 2, 5, 6])
    assert np.allclose(blockwise_scm(seq, 10).ravel(), 4)


def test_exponential_rows_match_online(rng):
    t = 20
    psi = instantaneous_scm(_random_spec(rng, 3, 2, t), rng.uniform(size=(2, t)))
    a = np.broadcast_to(exponential_attention(t, 0.995), (2, t, t))
    assert np.max(np.abs(attention_scm(a, psi) - online_scm(psi, 0.995))) <= 1e-9
    assert np.allclose(exponential_attention(t, 0.995).sum(1), 1.0)


def test_estimator_config_and_dispatch(rng):
    with pytest.raises(ValueError):
        EstimatorConfig(kind="median")
    with pytest.raises(ValueError):
        EstimatorConfig(forgetting_factor=1.0)
    psi = instantaneous_scm(_random_spec(rng, 2, 2, 6), rng.uniform(size=(2, 6)))
    assert np.array_equal(estimate_scm(psi, EstimatorConfig("online", 0.9)), online_scm(psi, 0.9))
    assert np.array_equal(estimate_scm(psi, EstimatorConfig("blockwise", block_size=3), causal=False),
                          blockwise_scm(psi, 3))
    with pytest.raises(ValueError):
        estimate_scm(psi, EstimatorConfig())


def _hermitian_psd_ok(phi):
    herm = np.max(np.abs(phi - np.conj(np.swapaxes(phi, -1, -2))))
    ev = np.linalg.eigvalsh(0.5 * (phi + np.conj(np.swapaxes(phi, -1, -2))))
    tr = np.trace(phi, axis1=-2, axis2=-1).real
    return herm <= 1e-10 and np.all(ev.min(-1) >= -1e-8 * np.maximum(tr, 0) - 1e-300)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 4), st.integers(1, 12))
def test_invariants(seed, m, f, t):
    r = np.random.default_rng(seed)
    y = _random_spec(r, m, f, t)
    mask = r.uniform(size=(f, t))
    ps = instantaneous_scm(y, mask, "speech")
    pn = instantaneous_scm(y, mask, "noise")
    assert np.array_equal(ps + pn, outer_products(np.moveaxis(y, 0, -1)))
    a = r.uniform(size=(f, t, t))
    a /= a.sum(-1, keepdims=True)
    for phi in (ps, attention_scm(a, ps), online_scm(pn, 0.9), blockwise_scm(ps, 3), blockwise_scm(pn, 2, True)):
        assert _hermitian_psd_ok(phi)
