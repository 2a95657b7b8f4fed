import numpy as np
import pytest
from hypothesis import given, strategies as st

from abicmvdr.spectral import ComplexSpectrogram, StftConfig, istft, stft, window

CFG = StftConfig()


def test_defaults_and_bins():
    assert (CFG.frame_length, CFG.hop, CFG.sample_rate) == (320, 160, 16000)
    assert CFG.num_bins == 161
    assert CFG.num_frames(16000) == 99


@pytest.mark.parametrize("kw", [dict(frame_length=321, hop=160), dict(frame_length=320, hop=100),
                                dict(frame_length=320, hop=80)])
def test_config_rejects_bad_framing(kw):
    with pytest.raises(ValueError):
        StftConfig(**kw)


def test_window_is_cola_at_half_overlap():
    w = window(CFG)
    assert np.allclose(w[:160] ** 2 + w[160:] ** 2, 1.0, atol=1e-12)


def test_zero_signal_and_zero_spectrogram():
    assert not np.any(stft(np.zeros((2, 4000))).data)
    spec = ComplexSpectrogram(np.zeros((1, 161, 5), complex), CFG)
    assert not np.any(istft(spec))


def test_sine_peaks_at_bin_20():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 1000 * t)
    mag = np.abs(stft(x).data[0])
    assert np.all(np.argmax(mag, axis=0) == 20)
    # direct DFT oracle on one windowed frame
    frame = x[:320] * window(CFG)
    k = np.arange(161)[:, None]
    n = np.arange(320)[None, :]
    direct = (frame[None, :] * np.exp(-2j * np.pi * k * n / 320)).sum(axis=1)
    assert np.allclose(stft(x).data[0, :, 0], direct, atol=1e-9)


def test_round_trip_interior(rng):
    x = rng.standard_normal((2, 16000))
    y = istft(stft(x))
    inner = slice(320, y.shape[-1] - 320)
    err = np.linalg.norm(y[:, inner] - x[:, inner]) / np.linalg.norm(x[:, inner])
    assert err <= 1e-6


def test_impulse_at_480():
    x = np.zeros(2000)
    x[480] = 1.0
    y = istft(stft(x))[0]
    assert abs(y[480] - 1.0) < 1e-6
    assert np.max(np.abs(np.delete(y, 480))) < 1e-6


def test_dc_only_frame_is_scaled_window():
    data = np.zeros((1, 161, 1), complex)
    data[0, 0, 0] = 1.0
    y = istft(ComplexSpectrogram(data, CFG))[0]
    assert np.allclose(y, window(CFG) / 320, atol=1e-15)


def test_short_and_nonfinite_inputs():
    with pytest.raises(ValueError, match="too short"):
        stft(np.zeros(100))
    bad = np.zeros(1000)
    bad[3] = np.nan
    with pytest.raises(ValueError):
        stft(bad)


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 1, 1200))
    lhs = stft(a * x + b * y).data
    rhs = a * stft(x).data + b * stft(y).data
    assert np.allclose(lhs, rhs, atol=1e-11)


@given(st.integers(0, 2**31 - 1))
def test_parseval_per_frame(seed):
    x = np.random.default_rng(seed).standard_normal(2000)
    spec = stft(x).data[0]
    w = window(CFG)
    for t in range(spec.shape[1]):
        seg = x[t * 160:t * 160 + 320] * w
        p = np.abs(spec[:, t]) ** 2
        freq_energy = (p[0] + p[-1] + 2 * p[1:-1].sum()) / 320
        assert abs(freq_energy - np.sum(seg ** 2)) <= 1e-6 * np.sum(seg ** 2)


@given(st.integers(0, 2**31 - 1), st.sampled_from([(8, 4), (64, 32), (320, 160)]))
def test_perfect_reconstruction_property(seed, framing):
    cfg = StftConfig(*framing)
    x = np.random.default_rng(seed).standard_normal(cfg.frame_length * 7 + 3)
    y = istft(stft(x, cfg))[0]
    inner = slice(cfg.frame_length, len(y) - cfg.frame_length)
    assert np.linalg.norm(y[inner] - x[inner]) <= 1e-6 * np.linalg.norm(x[inner])


def test_tail_samples_dropped():
    x = np.ones(1000)
    assert istft(stft(x)).shape[-1] == CFG.output_length(CFG.num_frames(1000)) == 960
