"""Souden-form MVDR filters and their application.

``w = (Phi_n^-1 Phi_s u) / tr(Phi_n^-1 Phi_s)``, with ``Phi_n`` diagonally loaded by
``delta * tr(Phi_n) / M``. Bins where the trace is degenerate or the solve fails
fall back to the reference selector ``u``, as do bins whose noise SCM has zero
trace. Noise SCMs with a trace below ``1e-10`` get an extra ``1e-10 * I``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BeamformerWeights",
    "mvdr_weights",
    "mvdr_backward",
    "apply_beamformer",
    "apply_beamformer_backward",
    "DEFAULT_LOADING",
]

DEFAULT_LOADING = 1e-6
ABS_FLOOR = 1e-10
TRACE_TOL = 1e-8
HERMITIAN_TOL = 1e-8


@dataclass
class BeamformerWeights:
    w: np.ndarray  # [... x M] complex
    ref_channel: int
    fallback: np.ndarray  # bool, w.shape[:-1]
    # solve intermediates kept for the backward pass
    cache: dict | None = None

    @property
    def fallback_count(self) -> int:
        return int(np.count_nonzero(self.fallback))


def _check_hermitian(x, name):
    dev = np.max(np.abs(x - np.conj(np.swapaxes(x, -1, -2))), initial=0.0)
    scale = max(np.max(np.abs(x), initial=0.0), 1.0)
    if dev > HERMITIAN_TOL * scale:
        raise ValueError(f"{name} is not Hermitian (max deviation {dev:.3g})")


def mvdr_weights(scm_speech, scm_noise, ref_channel: int = 0, loading: float = DEFAULT_LOADING,
                 keep_cache: bool = False) -> BeamformerWeights:
    """Per-bin MVDR filters from [... x M x M] speech and noise SCMs."""
    phi_s = np.asarray(scm_speech, dtype=np.complex128)
    phi_n = np.asarray(scm_noise, dtype=np.complex128)
    if phi_s.shape != phi_n.shape or phi_s.shape[-1] != phi_s.shape[-2]:
        raise ValueError(f"SCM shapes incompatible: {phi_s.shape} vs {phi_n.shape}")
    m = phi_s.shape[-1]
    if not 0 <= ref_channel < m:
        raise ValueError(f"reference channel {ref_channel} out of range for {m} channels")
    if loading < 0:
        raise ValueError("loading must be non-negative")
    _check_hermitian(phi_s, "speech SCM")
    _check_hermitian(phi_n, "noise SCM")

    eye = np.eye(m)
    tr_n = np.trace(phi_n, axis1=-2, axis2=-1).real
    diag = loading * tr_n / m
    diag = np.where(np.abs(tr_n) < ABS_FLOOR, diag + ABS_FLOOR, diag)
    phi_nl = phi_n + diag[..., None, None] * eye

    x = np.zeros_like(phi_s)
    # an all-zero noise SCM carries no noise statistics at all
    ok = tr_n != 0
    try:
        x = np.linalg.solve(phi_nl, phi_s)
    except np.linalg.LinAlgError:
        # batched solve aborts on the first singular bin; redo bin by bin
        flat_n = phi_nl.reshape(-1, m, m)
        flat_s = phi_s.reshape(-1, m, m)
        flat_x = x.reshape(-1, m, m)
        flat_ok = ok.reshape(-1)
        for i in range(flat_n.shape[0]):
            try:
                flat_x[i] = np.linalg.solve(flat_n[i], flat_s[i])
            except np.linalg.LinAlgError:
                flat_ok[i] = False
    ok &= np.all(np.isfinite(x), axis=(-2, -1))
    tr = np.trace(x, axis1=-2, axis2=-1)
    fro = np.linalg.norm(x, axis=(-2, -1))
    ok &= np.abs(tr) >= TRACE_TOL * fro
    ok &= fro > 0

    v = x[..., :, ref_channel]
    safe_tr = np.where(ok, tr, 1.0)
    w = v / safe_tr[..., None]
    w = np.where(ok[..., None], w, eye[ref_channel])
    fallback = ~ok
    cache = None
    if keep_cache:
        cache = {"phi_nl": phi_nl, "x": x, "trace": safe_tr, "v": v, "loading": loading}
    return BeamformerWeights(w=w, ref_channel=ref_channel, fallback=fallback, cache=cache)


def mvdr_backward(bf: BeamformerWeights, grad_w):
    """Gradients w.r.t. the speech and noise SCMs (``dL/dRe + i dL/dIm`` convention).

    Fallback bins contribute zero gradient.
    """
    if bf.cache is None:
        raise ValueError("mvdr_weights must be called with keep_cache=True")
    c = bf.cache
    phi_nl, x, tr, v = c["phi_nl"], c["x"], c["trace"], c["v"]
    m = x.shape[-1]
    g_w = np.where(bf.fallback[..., None], 0.0, grad_w)
    g_v = g_w / np.conj(tr)[..., None]
    g_tr = -np.sum(g_w * np.conj(v), axis=-1) / np.conj(tr) ** 2
    g_x = g_tr[..., None, None] * np.eye(m)
    g_x[..., :, bf.ref_channel] += g_v
    # X = Phi_nl^-1 Phi_s
    g_s = np.linalg.solve(np.conj(np.swapaxes(phi_nl, -1, -2)), g_x)
    g_nl = -g_s @ np.conj(np.swapaxes(x, -1, -2))
    g_n = g_nl + (c["loading"] / m) * np.trace(g_nl, axis1=-2, axis2=-1).real[..., None, None] * np.eye(m)
    return g_s, g_n


def apply_beamformer(bf, vectors) -> np.ndarray:
    """``S_hat = w^H Y`` per bin; ``vectors`` is [... x M] matching the filter layout."""
    w = bf.w if isinstance(bf, BeamformerWeights) else np.asarray(bf)
    y = np.asarray(vectors)
    if w.shape != y.shape:
        raise ValueError(f"filter shape {w.shape} does not match observation shape {y.shape}")
    return np.sum(np.conj(w) * y, axis=-1)


def apply_beamformer_backward(vectors, grad_out):
    """Gradient w.r.t. the filter of ``w^H Y`` with the observations held fixed."""
    return np.conj(grad_out)[..., None] * vectors
