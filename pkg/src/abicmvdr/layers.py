"""Forward and backward passes of the network primitives, float64 numpy.

Feature maps are [B x C x F x T]. Every ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward`` consumes the upstream gradient and the cache.
"""
from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def _unfold(x, kernel):
    # [B, C, F, T] -> [B, C*K, F*T] of zero-padded frequency neighbourhoods
    pad = kernel // 2
    b, c, f, t = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    unf = np.stack([xp[:, :, k:k + f] for k in range(kernel)], axis=2)
    return unf.reshape(b, c * kernel, f * t)


def conv_forward(x, weight, bias):
    """Stride-1 frequency convolution. ``weight`` is [C_out x C_in x K x 1]."""
    w = weight[..., 0]
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"expected {w.shape[1]} input channels, got {x.shape[1]}")
    b, _, f, t = x.shape
    unf = _unfold(x, w.shape[2])
    y = np.matmul(w.reshape(w.shape[0], -1), unf).reshape(b, w.shape[0], f, t)
    y += bias[None, :, None, None]
    return y, (unf, w)


def conv_backward(gy, cache):
    unf, w = cache
    b, o, f, t = gy.shape
    g2 = gy.reshape(b, o, f * t)
    g_w = np.einsum("bon,bjn->oj", g2, unf, optimize=True).reshape(w.shape)[..., None]
    g_b = gy.sum(axis=(0, 2, 3))
    # input gradient is the transposed convolution: flipped kernel, swapped channels
    w_t = np.flip(np.swapaxes(w, 0, 1), axis=2)
    g_x = np.matmul(w_t.reshape(w_t.shape[0], -1), _unfold(gy, w.shape[2])).reshape(b, w.shape[1], f, t)
    return g_x, g_w, g_b


def deconv_forward(x, weight, bias):
    """Stride-1 transposed convolution. ``weight`` is [C_in x C_out x K x 1]."""
    w_eq = np.flip(np.swapaxes(weight, 0, 1), axis=2)
    return conv_forward(x, w_eq, bias)


def deconv_backward(gy, cache):
    g_x, g_weq, g_b = conv_backward(gy, cache)
    return g_x, np.flip(np.swapaxes(g_weq, 0, 1), axis=2), g_b


def bn_forward(x, gamma, beta, running_mean, running_var, training):
    """Per-channel batch norm over (B, F, T). Training mode normalizes with batch stats."""
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv, gamma, training, mean, var)


def bn_backward(gy, cache):
    xhat, inv, gamma, training, _, _ = cache
    g_gamma = np.sum(gy * xhat, axis=(0, 2, 3))
    g_beta = gy.sum(axis=(0, 2, 3))
    g_xhat = gy * gamma[None, :, None, None]
    if training:
        n = gy.shape[0] * gy.shape[2] * gy.shape[3]
        g_x = (inv[None, :, None, None] / n) * (
            n * g_xhat
            - g_xhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * np.sum(g_xhat * xhat, axis=(0, 2, 3), keepdims=True)
        )
    else:
        g_x = g_xhat * inv[None, :, None, None]
    return g_x, g_gamma, g_beta


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))


def sigmoid(x):
    # split by sign to avoid overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation_forward(x, kind):
    if kind == "elu":
        return elu(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(gy, x, y, kind):
    if kind == "elu":
        return gy * elu_grad(x)
    if kind == "tanh":
        return gy * (1.0 - y * y)
    if kind == "sigmoid":
        return gy * y * (1.0 - y)
    return gy


def lstm_forward(x, w_ih, w_hh, bias):
    """Single LSTM layer over [N x T x I] sequences, zero initial state, gates (i, f, g, o)."""
    n, t, _ = x.shape
    h = w_hh.shape[1]
    xw = x @ w_ih.T + bias
    hs = np.zeros((n, t, h))
    cs = np.zeros((n, t, h))
    gates = np.zeros((n, t, 4 * h))
    h_prev = np.zeros((n, h))
    c_prev = np.zeros((n, h))
    for step in range(t):
        z = xw[:, step] + h_prev @ w_hh.T
        ifo = sigmoid(np.concatenate([z[:, :2 * h], z[:, 3 * h:]], axis=1))
        g = np.tanh(z[:, 2 * h:3 * h])
        i, f, o = ifo[:, :h], ifo[:, h:2 * h], ifo[:, 2 * h:]
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        gates[:, step] = np.concatenate([i, f, g, o], axis=1)
        cs[:, step] = c_prev
        hs[:, step] = h_prev
    if not np.all(np.isfinite(hs)):
        raise FloatingPointError("LSTM divergence")
    return hs, (x, hs, cs, gates, w_ih, w_hh)


def lstm_backward(g_hs, cache):
    x, hs, cs, gates, w_ih, w_hh = cache
    n, t, _ = x.shape
    h = w_hh.shape[1]
    g_z = np.zeros((n, t, 4 * h))
    g_h_next = np.zeros((n, h))
    g_c_next = np.zeros((n, h))
    for step in reversed(range(t)):
        i, f, g, o = (gates[:, step, k * h:(k + 1) * h] for k in range(4))
        c = cs[:, step]
        c_prev = cs[:, step - 1] if step > 0 else np.zeros((n, h))
        tc = np.tanh(c)
        gh = g_hs[:, step] + g_h_next
        gc = g_c_next + gh * o * (1 - tc * tc)
        g_z[:, step] = np.concatenate(
            [gc * g * i * (1 - i), gc * c_prev * f * (1 - f), gc * i * (1 - g * g), gh * tc * o * (1 - o)],
            axis=1,
        )
        g_c_next = gc * f
        g_h_next = g_z[:, step] @ w_hh
    h_prev = np.concatenate([np.zeros((n, 1, h)), hs[:, :-1]], axis=1)
    g_w_ih = np.einsum("ntg,nti->gi", g_z, x, optimize=True)
    g_w_hh = np.einsum("ntg,nth->gh", g_z, h_prev, optimize=True)
    g_b = g_z.sum(axis=(0, 1))
    g_x = g_z @ w_ih
    return g_x, g_w_ih, g_w_hh, g_b
