"""Spatial covariance estimation from masked instantaneous outer products.

All sequences are laid out [F x T x M x M].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import ComplexSpectrogram

__all__ = [
    "EstimatorConfig",
    "observation_vectors",
    "outer_products",
    "masked_iscms",
    "instantaneous_scm",
    "attention_scm",
    "attention_scm_backward",
    "online_scm",
    "blockwise_scm",
    "exponential_attention",
    "estimate_scm",
]

FORGETTING_FACTOR = 0.995
BLOCK_SIZE = 30


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "attention"
    forgetting_factor: float = FORGETTING_FACTOR
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.kind not in ("attention", "online", "blockwise"):
            raise ValueError(f"unknown estimator {self.kind!r}")
        if not 0 < self.forgetting_factor < 1:
            raise ValueError("forgetting_factor must lie in (0, 1)")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def observation_vectors(spec) -> np.ndarray:
    """[M x F x T] spectrogram -> [F x T x M] per-bin channel vectors."""
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    return np.moveaxis(data, 0, -1)


def outer_products(vectors) -> np.ndarray:
    """Y Y^H for every bin of a [... x M] array, exactly Hermitian."""
    r = vectors[..., :, None] * np.conj(vectors[..., None, :])
    return 0.5 * (r + np.conj(np.swapaxes(r, -1, -2)))


def _exact_split(r, m):
    # a = m*r and d = r - a with fl(a + d) == r bitwise; where r - a cannot be
    # represented that way (rounding ties) a is moved one ulp toward zero
    a = m * r
    d = r - a
    for _ in range(8):
        s = a + d
        miss = s != r
        if not miss.any():
            return a, d
        d = np.where(miss, d + (r - s), d)
        tie = (a + d) != r
        a = np.where(tie, np.nextafter(a, 0.0), a)
        d = np.where(tie, r - a, d)
    raise FloatingPointError("could not split ISCM exactly")


def masked_iscms(outer, mask):
    """Speech and noise ISCMs ``m * R`` and ``(1 - m) * R`` from outer products ``R``.

    The pair sums to ``R`` bit-exactly; each differs from the naive product by at most one ulp.
    """
    r = np.ascontiguousarray(outer, dtype=np.complex128)
    m = np.asarray(mask, dtype=np.float64)[..., None, None, None]
    rv = r.view(np.float64).reshape(r.shape + (2,))
    a, d = _exact_split(rv, m)
    return a.reshape(r.shape[:-1] + (-1,)).view(np.complex128), d.reshape(r.shape[:-1] + (-1,)).view(np.complex128)


def instantaneous_scm(spec, mask, target: str = "speech") -> np.ndarray:
    """Mask-weighted instantaneous SCM: ``m * Y Y^H`` (speech) or ``(1 - m) * Y Y^H`` (noise).

    ``mask`` is [F x T] in [0, 1].
    """
    y = observation_vectors(spec)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != y.shape[:-1]:
        raise ValueError(f"mask shape {m.shape} does not match spectrogram bins {y.shape[:-1]}")
    if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
        raise ValueError("mask values must lie in [0, 1]")
    if target not in ("speech", "noise"):
        raise ValueError(f"unknown target {target!r}")
    speech, noise = masked_iscms(outer_products(y), m)
    return speech if target == "speech" else noise


def _as_real(x):
    # complex [..., N] -> interleaved float64 [..., 2N] view
    return np.ascontiguousarray(x, dtype=np.complex128).view(np.float64)


def attention_scm(weights, iscm) -> np.ndarray:
    """``Phi[f, t] = sum_tau A[f, t, tau] * Psi[f, tau]``."""
    a = np.asarray(weights, dtype=np.float64)
    psi = np.asarray(iscm)
    if a.shape[:-1] != psi.shape[:-2] or a.shape[-1] != psi.shape[-3]:
        raise ValueError(f"attention {a.shape} incompatible with ISCM {psi.shape}")
    flat = _as_real(psi.reshape(psi.shape[:-2] + (-1,)))
    # A is real, so one real matmul over interleaved (re, im) columns suffices
    return np.matmul(a, flat).view(np.complex128).reshape(psi.shape)


def attention_scm_backward(weights, iscm, grad_scm):
    """Returns (grad w.r.t. attention weights, grad w.r.t. ISCM)."""
    psi = np.asarray(iscm)
    flat = _as_real(psi.reshape(psi.shape[:-2] + (-1,)))
    g = _as_real(np.asarray(grad_scm).reshape(psi.shape[:-2] + (-1,)))
    g_a = np.matmul(g, np.swapaxes(flat, -1, -2))
    g_psi = np.matmul(np.swapaxes(weights, -1, -2), g).view(np.complex128)
    return g_a, g_psi.reshape(psi.shape)


def online_scm(iscm, forgetting_factor: float = FORGETTING_FACTOR) -> np.ndarray:
    """Exponential recursion ``Phi_t = lam * Phi_{t-1} + (1 - lam) * Psi_t`` with ``Phi_0 = Psi_0``."""
    lam = forgetting_factor
    if not 0 < lam < 1:
        raise ValueError("forgetting factor must lie in (0, 1)")
    psi = np.asarray(iscm)
    out = np.empty_like(psi)
    out[..., 0, :, :] = psi[..., 0, :, :]
    for t in range(1, psi.shape[-3]):
        out[..., t, :, :] = lam * out[..., t - 1, :, :] + (1 - lam) * psi[..., t, :, :]
    return out


def blockwise_scm(iscm, block_size: int = BLOCK_SIZE, causal: bool = False) -> np.ndarray:
    """Block means of the ISCM; causal mode uses the running mean from the block start."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    psi = np.asarray(iscm)
    out = np.empty_like(psi)
    num = psi.shape[-3]
    for start in range(0, num, block_size):
        block = psi[..., start:start + block_size, :, :]
        if causal:
            count = np.arange(1, block.shape[-3] + 1)[:, None, None]
            out[..., start:start + block_size, :, :] = np.cumsum(block, axis=-3) / count
        else:
            out[..., start:start + block_size, :, :] = block.mean(axis=-3, keepdims=True)
    return out


def exponential_attention(num_frames: int, forgetting_factor: float = FORGETTING_FACTOR) -> np.ndarray:
    """[T x T] causal rows reproducing :func:`online_scm` through :func:`attention_scm`."""
    lam = forgetting_factor
    t = np.arange(num_frames)[:, None]
    tau = np.arange(num_frames)[None, :]
    rows = np.where(tau <= t, (1 - lam) * lam ** np.maximum(t - tau, 0), 0.0)
    rows[:, 0] = lam ** np.arange(num_frames)
    return rows


def estimate_scm(iscm, cfg: EstimatorConfig, causal: bool = True) -> np.ndarray:
    """Baseline (non-attention) SCM estimators selected by ``cfg.kind``."""
    if cfg.kind == "online":
        return online_scm(iscm, cfg.forgetting_factor)
    if cfg.kind == "blockwise":
        return blockwise_scm(iscm, cfg.block_size, causal=causal)
    raise ValueError("attention SCMs need attention weights; use attention_scm")
