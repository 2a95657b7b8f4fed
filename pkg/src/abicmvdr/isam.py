"""Per-frequency scaled dot-product attention over time frames."""
from __future__ import annotations

import numpy as np

__all__ = ["attention_weights", "attention_backward", "causal_mask", "attention_entropy", "MAX_FRAMES"]

MAX_FRAMES = 3000


def causal_mask(num_frames: int) -> np.ndarray:
    """Boolean [T x T] with True where key frame j <= query frame i."""
    return np.tril(np.ones((num_frames, num_frames), dtype=bool))


def attention_weights(query, key, causal: bool = True, max_frames: int = MAX_FRAMES) -> np.ndarray:
    """Softmax over key frames of ``query @ key.T / sqrt(D)`` for every frequency.

    Arguments:
        query, key: [F x T x D] (a leading batch axis is allowed)
        causal: exclude key frames later than the query frame from the softmax
    Return:
        [F x T x T] row-stochastic weights, rows indexed by query frame
    """
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(key, dtype=np.float64)
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    if q.ndim < 3:
        raise ValueError("query/key must be [F x T x D]")
    t, d = q.shape[-2:]
    if t == 0 or d == 0:
        raise ValueError("need T >= 1 and D >= 1")
    if not causal and t > max_frames:
        raise ValueError(f"non-causal attention over {t} frames exceeds the cap of {max_frames}")
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(d)
    if causal:
        keep = causal_mask(t)
        logits = np.where(keep, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    if causal:
        e = np.where(keep, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def attention_backward(weights, grad_weights, query, key):
    """Gradients of a loss w.r.t. query and key given its gradient w.r.t. the weights."""
    d = query.shape[-1]
    a = weights
    g_logits = a * (grad_weights - np.sum(grad_weights * a, axis=-1, keepdims=True))
    g_logits /= np.sqrt(d)
    g_query = np.matmul(g_logits, key)
    g_key = np.matmul(np.swapaxes(g_logits, -1, -2), query)
    return g_query, g_key


def attention_entropy(weights) -> np.ndarray:
    """Mean (over frequency) entropy in nats of each query frame's weight row; returns [T]."""
    a = np.asarray(weights)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(a > 0, a * np.log(a), 0.0).sum(axis=-1)
    return h.reshape(-1, *h.shape[-1:]).mean(axis=0)
