"""Free-field multichannel scene synthesis.

A dry source is propagated to each microphone with a time-varying delay
``d_m(t) / c`` and a ``1 / d_m(t)`` gain. Fractional delays use a 32-tap
Kaiser-windowed sinc interpolator evaluated per output sample, which also
approximates Doppler for moving sources. No reverberation is modelled;
pre-rendered multichannel images can be fed to :func:`mix_at_snr` directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import signal as sps
from scipy import special

__all__ = [
    "ArrayGeometry",
    "Trajectory",
    "SceneConfig",
    "Scene",
    "circular_array",
    "render_moving_source",
    "mix_at_snr",
    "make_scene",
    "sample_trajectory",
    "synth_speech",
    "synth_noise",
    "SPEED_RANGE",
    "D_FLOOR",
]

# observed source speeds in m/s (min, max) of the moving-speaker corpus
SPEED_RANGE = (0.012, 2.404)
D_FLOOR = 0.05
NUM_TAPS = 32
KAISER_BETA = 8.0


@dataclass
class ArrayGeometry:
    mic_positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("mic_positions must be [M x 3]")
        if pos.shape[0] < 2:
            raise ValueError("need at least two microphones")
        diff = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        if np.any(diff[np.triu_indices(len(pos), 1)] == 0):
            raise ValueError("microphone positions must be pairwise distinct")
        self.mic_positions = pos

    @property
    def num_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def center(self) -> np.ndarray:
        return self.mic_positions.mean(axis=0)


def circular_array(num_mics: int = 5, radius: float = 0.1, height: float = 1.5) -> ArrayGeometry:
    """Uniform circular array in the horizontal plane."""
    phi = 2 * np.pi * np.arange(num_mics) / num_mics
    pos = np.stack([radius * np.cos(phi), radius * np.sin(phi), np.full(num_mics, height)], axis=1)
    return ArrayGeometry(pos)


@dataclass
class Trajectory:
    """Piecewise-linear source path; held constant outside the waypoint span."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=np.float64))
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if self.positions.shape != (len(self.times), 3):
            raise ValueError("positions must be [K x 3] matching times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.positions))):
            raise ValueError("non-finite waypoint")

    @classmethod
    def fixed(cls, position) -> "Trajectory":
        return cls([0.0], [position])

    def position(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if len(self.times) == 1:
            return np.broadcast_to(self.positions[0], t.shape + (3,)).copy()
        return np.stack([np.interp(t, self.times, self.positions[:, k]) for k in range(3)], axis=-1)

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    def covers(self, duration: float) -> bool:
        if len(self.times) == 1:
            return True
        return self.times[0] <= 0 and self.times[-1] >= duration

    def to_dict(self) -> dict:
        return {"waypoints": [[float(t), [float(v) for v in p]] for t, p in zip(self.times, self.positions)]}


@dataclass
class SceneConfig:
    geometry: ArrayGeometry = field(default_factory=circular_array)
    snr_db: float | None = None  # None: uniform in snr_range
    snr_range: tuple = (-10.0, 10.0)
    sound_speed: float = 343.0
    sample_rate: int = 16000
    seed: int = 0
    source_moving: bool = True
    speed_range: tuple = SPEED_RANGE
    start_radius: tuple = (1.0, 3.0)
    min_clearance: float = 0.3
    ref_channel: int = 0
    # uncorrelated sensor noise added to the noise image, dB below the point noise
    sensor_noise_db: float | None = 30.0

    def __post_init__(self):
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


@dataclass
class Scene:
    mixture: np.ndarray
    speech_image: np.ndarray
    noise_image: np.ndarray
    snr_db: float
    noise_scale: float
    metadata: dict = field(default_factory=dict)


def _sinc_kernel(frac_offsets: np.ndarray) -> np.ndarray:
    half = NUM_TAPS / 2
    x = np.clip(frac_offsets / half, -1.0, 1.0)
    win = special.i0(KAISER_BETA * np.sqrt(1.0 - x * x)) / special.i0(KAISER_BETA)
    return np.sinc(frac_offsets) * win


def _fractional_read(dry: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Band-limited read of ``dry`` at real-valued sample positions ``pos`` (zero outside)."""
    base = np.floor(pos).astype(np.int64)
    taps = np.arange(-NUM_TAPS // 2 + 1, NUM_TAPS // 2 + 1)
    idx = base[:, None] + taps[None, :]
    kern = _sinc_kernel(pos[:, None] - idx)
    valid = (idx >= 0) & (idx < len(dry))
    vals = np.where(valid, dry[np.clip(idx, 0, len(dry) - 1)], 0.0)
    return np.einsum("nk,nk->n", vals, kern)


def render_moving_source(dry, traj: Trajectory, geom: ArrayGeometry, cfg: SceneConfig | None = None) -> np.ndarray:
    """Render a mono source along ``traj`` to every microphone; returns [M x L]."""
    cfg = cfg or SceneConfig(geometry=geom)
    dry = np.asarray(dry, dtype=np.float64)
    if dry.ndim != 1:
        raise ValueError("dry signal must be mono")
    fs = cfg.sample_rate
    n = np.arange(len(dry))
    if not traj.covers((len(dry) - 1) / fs):
        raise ValueError("trajectory does not cover the signal duration")
    src = traj.position(n / fs)
    out = np.empty((geom.num_mics, len(dry)))
    for m, mic in enumerate(geom.mic_positions):
        dist = np.linalg.norm(src - mic, axis=-1)
        if np.min(dist) < D_FLOOR:
            raise ValueError("source too close")
        delay = dist / cfg.sound_speed * fs
        out[m] = _fractional_read(dry, n - delay) / np.maximum(dist, D_FLOOR)
    return out


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(speech_image, noise_image, snr_db: float, ref_channel: int = 0) -> Scene:
    """Scale the noise so the reference-channel SNR equals ``snr_db`` and sum."""
    s = np.asarray(speech_image, dtype=np.float64)
    n = np.asarray(noise_image, dtype=np.float64)
    if s.shape != n.shape:
        raise ValueError(f"image shapes differ: {s.shape} vs {n.shape}")
    ps, pn = _power(s[ref_channel]), _power(n[ref_channel])
    if ps == 0 or pn == 0:
        raise ValueError("degenerate SNR: silent speech or noise on reference channel")
    scale = float(np.sqrt(ps / (pn * 10 ** (snr_db / 10))))
    mixture = s + n * scale
    # noise image defined as the residual so mixture - speech - noise is exactly zero
    return Scene(mixture=mixture, speech_image=s, noise_image=mixture - s, snr_db=float(snr_db), noise_scale=scale)


def _random_point(rng, geom: ArrayGeometry, radius_range) -> np.ndarray:
    r = rng.uniform(*radius_range)
    phi = rng.uniform(0, 2 * np.pi)
    return geom.center + np.array([r * np.cos(phi), r * np.sin(phi), 0.0])


def _segment_clearance(a, b, points) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return float(np.min(np.linalg.norm(points - a, axis=1)))
    u = np.clip((points - a) @ ab / denom, 0, 1)
    closest = a + u[:, None] * ab
    return float(np.min(np.linalg.norm(points - closest, axis=1)))


def sample_trajectory(rng, cfg: SceneConfig, duration: float) -> Trajectory:
    geom = cfg.geometry
    for _ in range(1000):
        start = _random_point(rng, geom, cfg.start_radius)
        if not cfg.source_moving:
            return Trajectory.fixed(start)
        speed = rng.uniform(*cfg.speed_range)
        phi = rng.uniform(0, 2 * np.pi)
        end = start + speed * duration * np.array([np.cos(phi), np.sin(phi), 0.0])
        # keep the straight path away from the array
        if _segment_clearance(start, end, geom.mic_positions) >= cfg.min_clearance:
            return Trajectory([0.0, duration], [start, end])
    raise RuntimeError("could not sample a trajectory with the requested clearance")


def make_scene(cfg: SceneConfig, dry_speech, dry_noise) -> Scene:
    """Deterministic scene from ``cfg.seed``: trajectory, rendering, noise and SNR mixing."""
    rng = np.random.default_rng(cfg.seed)
    geom = cfg.geometry
    dry_speech = np.asarray(dry_speech, dtype=np.float64)
    length = len(dry_speech)
    duration = (length - 1) / cfg.sample_rate

    snr = cfg.snr_db if cfg.snr_db is not None else float(rng.uniform(*cfg.snr_range))
    traj = sample_trajectory(rng, cfg, duration)
    speech_image = render_moving_source(dry_speech, traj, geom, cfg)

    dry_noise = np.asarray(dry_noise, dtype=np.float64)
    noise_pos = None
    if dry_noise.ndim == 1:
        if len(dry_noise) < length:
            raise ValueError("noise shorter than speech")
        noise_pos = _random_point(rng, geom, cfg.start_radius)
        noise_image = render_moving_source(dry_noise[:length], Trajectory.fixed(noise_pos), geom, cfg)
    else:
        if dry_noise.shape[0] != geom.num_mics or dry_noise.shape[1] < length:
            raise ValueError("multichannel noise must be [M x >=L]")
        noise_image = dry_noise[:, :length].copy()
    if cfg.sensor_noise_db is not None:
        level = np.sqrt(_power(noise_image[cfg.ref_channel]) * 10 ** (-cfg.sensor_noise_db / 10))
        noise_image = noise_image + level * rng.standard_normal(noise_image.shape)

    scene = mix_at_snr(speech_image, noise_image, snr, cfg.ref_channel)
    scene.metadata = {
        "geometry": geom.mic_positions.tolist(),
        "trajectory": traj.to_dict(),
        "noise_position": None if noise_pos is None else noise_pos.tolist(),
        "snr_db": snr,
        "seed": cfg.seed,
        "sample_rate": cfg.sample_rate,
        "sound_speed": cfg.sound_speed,
        "source_moving": cfg.source_moving,
        "ref_channel": cfg.ref_channel,
        "noise_scale": scene.noise_scale,
    }
    return scene


def synth_speech(duration: float, sample_rate: int = 16000, seed: int = 0) -> np.ndarray:
    """Crude speech stand-in: syllabic bursts of gliding harmonic tones shaped by two formants."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    pos = int(rng.uniform(0.02, 0.08) * sample_rate)
    while pos < n:
        syl = int(rng.uniform(0.12, 0.3) * sample_rate)
        gap = int(rng.uniform(0.03, 0.12) * sample_rate)
        seg = slice(pos, min(pos + syl, n))
        ts = t[seg] - t[pos]
        f0 = rng.uniform(100, 220) * (1 + rng.uniform(-0.2, 0.2) * ts / max(ts[-1], 1e-9))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        voiced = sum(np.cos(k * phase) / k for k in range(1, 25) if k * f0.max() < sample_rate / 2)
        env = np.sin(np.pi * np.linspace(0, 1, len(ts))) ** 2
        burst = voiced * env
        for fc in (rng.uniform(300, 900), rng.uniform(1000, 2500)):
            b, a = sps.iirpeak(fc, 4.0, fs=sample_rate)
            burst = burst + 0.7 * sps.lfilter(b, a, burst)
        out[seg] += burst * rng.uniform(0.5, 1.0)
        pos += syl + gap
    return out / (np.max(np.abs(out)) + 1e-12) * 0.5


def synth_noise(duration: float, sample_rate: int = 16000, seed: int = 0, color: str = "pink") -> np.ndarray:
    """White or approximately pink noise, unit RMS."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    x = rng.standard_normal(n)
    if color == "pink":
        spec = np.fft.rfft(x)
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        x = np.fft.irfft(spec / np.sqrt(f), n=n)
    elif color != "white":
        raise ValueError(f"unknown noise color {color!r}")
    return x / np.sqrt(np.mean(x * x))


def config_to_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["geometry"] = cfg.geometry.mic_positions.tolist()
    return d
