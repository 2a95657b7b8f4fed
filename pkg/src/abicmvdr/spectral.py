"""STFT analysis / overlap-add synthesis with square-root Hann windows.

Frames are taken without padding: a signal of length L yields
``T = (L - frame_length) // hop + 1`` frames and trailing samples that do not
fill a whole frame are dropped. Samples in ``[hop, (T-1)*hop + frame_length - hop)``
are reconstructed exactly by ``istft(stft(x))``; the first and last hop only
see one analysis frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["StftConfig", "ComplexSpectrogram", "stft", "istft", "istft_adjoint", "window"]


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 320
    hop: int = 160
    sample_rate: int = 16000
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.frame_length <= 0 or self.hop <= 0:
            raise ValueError("frame_length and hop must be positive")
        if self.frame_length % 2:
            raise ValueError("frame_length must be even")
        if self.frame_length % self.hop:
            raise ValueError("hop must divide frame_length")
        if self.window != "sqrt_hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if self.frame_length != 2 * self.hop:
            # sqrt-Hann analysis+synthesis only sums to one at 50% overlap
            raise ValueError("sqrt_hann window requires hop == frame_length / 2")

    @property
    def num_bins(self) -> int:
        return self.frame_length // 2 + 1

    def num_frames(self, length: int) -> int:
        return (length - self.frame_length) // self.hop + 1

    def output_length(self, num_frames: int) -> int:
        return (num_frames - 1) * self.hop + self.frame_length


def window(cfg: StftConfig) -> np.ndarray:
    n = np.arange(cfg.frame_length)
    # periodic Hann, so that w[n] + w[n + hop] == 1
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.frame_length)
    return np.sqrt(hann)


@dataclass
class ComplexSpectrogram:
    """Complex STFT coefficients, ``data`` shaped [M x F x T]."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"expected [M x F x T] data, got shape {data.shape}")
        if data.shape[1] != self.config.num_bins:
            raise ValueError(
                f"F mismatch: data has {data.shape[1]} bins, config implies {self.config.num_bins}"
            )
        self.data = data

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[2]


def _frames(signal: np.ndarray, cfg: StftConfig) -> np.ndarray:
    # [M x T x N] view of the framed signal
    num = cfg.num_frames(signal.shape[-1])
    idx = np.arange(num)[:, None] * cfg.hop + np.arange(cfg.frame_length)[None, :]
    return signal[:, idx]


def stft(signal: np.ndarray, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """Windowed one-sided DFT of every full frame of a [M x L] (or [L]) signal."""
    cfg = cfg or StftConfig()
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise ValueError("signal must be [M x L]")
    if x.shape[-1] < cfg.frame_length:
        raise ValueError("input too short")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    spec = np.fft.rfft(_frames(x, cfg) * window(cfg), axis=-1)
    return ComplexSpectrogram(np.ascontiguousarray(spec.transpose(0, 2, 1)), cfg)


def istft(spec: ComplexSpectrogram | np.ndarray, cfg: StftConfig | None = None) -> np.ndarray:
    """Overlap-add synthesis; returns [M x (T-1)*hop + frame_length]."""
    if isinstance(spec, ComplexSpectrogram):
        cfg = spec.config
        data = spec.data
    else:
        cfg = cfg or StftConfig()
        data = np.asarray(spec)
        if data.ndim == 2:
            data = data[None]
        if data.shape[1] != cfg.num_bins:
            raise ValueError(
                f"F mismatch: data has {data.shape[1]} bins, config implies {cfg.num_bins}"
            )
    m, _, t = data.shape
    frames = np.fft.irfft(data.transpose(0, 2, 1), n=cfg.frame_length, axis=-1) * window(cfg)
    out = np.zeros((m, cfg.output_length(t)))
    # frames at stride hop with frame_length = 2*hop: add the two halves separately
    h = cfg.hop
    for k in range(cfg.frame_length // h):
        seg = frames[:, :, k * h:(k + 1) * h].reshape(m, -1)
        out[:, k * h:k * h + t * h] += seg
    return out


def istft_adjoint(grad: np.ndarray, cfg: StftConfig, num_frames: int) -> np.ndarray:
    """Gradient of a real loss w.r.t. the spectrogram given its gradient w.r.t. ``istft`` output.

    Complex gradients follow the ``dL/dRe + i dL/dIm`` convention.
    """
    g = np.asarray(grad, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[None]
    frames = _frames(g, cfg)[:, :num_frames] * window(cfg)
    n = cfg.frame_length
    scale = np.full(cfg.num_bins, 2.0 / n)
    scale[0] = scale[-1] = 1.0 / n
    out = (np.fft.rfft(frames, axis=-1) * scale).transpose(0, 2, 1)
    return out[0] if squeeze else out
