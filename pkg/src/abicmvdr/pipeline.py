"""End-to-end enhancement: STFT -> backbone -> masked ISCMs -> attention SCMs -> MVDR -> iSTFT.

The differentiable path (attention estimator) has a hand-written backward pass
used by :func:`grad_check` and :func:`train_toy`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import isam, mvdr, scm
from .igcrn import HEADS, IgcrnConfig, ModelWeights, igcrn_backward, igcrn_forward, update_running_stats
from .scene import Scene, SceneConfig, circular_array, make_scene, mix_at_snr, synth_noise, synth_speech
from .spectral import StftConfig, istft, istft_adjoint, stft

__all__ = [
    "EnhanceConfig",
    "TrainConfig",
    "enhance",
    "enhance_batch",
    "oracle_mask",
    "snr_loss",
    "snr_loss_grad",
    "si_sdr",
    "valid_region",
    "grad_check",
    "loss_and_grads",
    "train_toy",
    "smooth",
    "metric_report",
    "TINY_ARCH",
    "TINY_STFT",
    "TOY_ARCH",
    "TOY_STFT",
    "tiny_scene",
    "toy_scenes",
    "with_estimator",
]

EPS_REL = 1e-8

# gradient-check preset: M = 2, F = 5, T = 6, D = 4, widths 4
TINY_ARCH = IgcrnConfig(num_mics=2, channels=4, num_layers=2, kernel=5, lstm_hidden=4, lstm_layers=2, attn_dim=4)
TINY_STFT = StftConfig(frame_length=8, hop=4)
# toy-training preset
TOY_ARCH = IgcrnConfig(num_mics=3, channels=8, num_layers=3, kernel=5, lstm_hidden=8, lstm_layers=2, attn_dim=8)
TOY_STFT = StftConfig(frame_length=128, hop=64)


@dataclass(frozen=True)
class EnhanceConfig:
    causal: bool = True
    estimator: scm.EstimatorConfig = field(default_factory=scm.EstimatorConfig)
    ref_channel: int = 0
    stft: StftConfig = field(default_factory=StftConfig)
    loading: float = mvdr.DEFAULT_LOADING


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    steps: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


def _energy(x) -> float:
    return float(np.dot(x, x))


def snr_loss(estimate, reference) -> float:
    """Negative SNR in dB with an error floor of ``1e-8 * ||s||^2``."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {s.shape}")
    ps = _energy(s)
    if ps == 0:
        raise ValueError("silent reference")
    return -10 * np.log10(ps / (_energy(s - e) + EPS_REL * ps))


def snr_loss_grad(estimate, reference) -> np.ndarray:
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    ps = _energy(s)
    err = e - s
    return (10 / np.log(10)) * 2 * err / (_energy(err) + EPS_REL * ps)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB; capped at 80 dB by a ``1e-8 * ||target||^2`` floor."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {s.shape}")
    ps, pe = _energy(s), _energy(e)
    if ps == 0 or pe == 0:
        raise ValueError("silent input")
    target = (np.dot(e, s) / ps) * s
    pt = _energy(target)
    if pt == 0:
        return -np.inf
    return 10 * np.log10(pt / (_energy(e - target) + EPS_REL * pt))


def valid_region(cfg: StftConfig, length: int) -> slice:
    """Samples of an ``length``-sample input that synthesis reconstructs from two full frames."""
    out_len = cfg.output_length(cfg.num_frames(length))
    return slice(cfg.frame_length, out_len - cfg.frame_length)


def oracle_mask(scene: Scene, cfg: EnhanceConfig) -> np.ndarray:
    """Wiener-like mask ``|S|^2 / (|S|^2 + |N|^2)`` on the reference channel, [F x T]."""
    s = stft(scene.speech_image[cfg.ref_channel], cfg.stft).data[0]
    n = stft(scene.noise_image[cfg.ref_channel], cfg.stft).data[0]
    ps, pn = np.abs(s) ** 2, np.abs(n) ** 2
    total = ps + pn
    return np.where(total > 0, ps / np.where(total > 0, total, 1.0), 0.5)


def _forward(spec_data, weights, cfg: EnhanceConfig, training=False, mask=None, attention=None, keep_cache=False):
    """Batched forward on [B x M x F x T] spectra; returns (signals [B x L'], cache)."""
    b, m, f, t = spec_data.shape
    use_attention = cfg.estimator.kind == "attention"
    need_net = mask is None or (use_attention and attention is None)
    net_cache = None
    outputs = None
    if need_net:
        if weights.arch.num_mics != m:
            raise ValueError(f"mixture has {m} channels, model expects {weights.arch.num_mics}")
        feats = np.concatenate([spec_data.real, spec_data.imag], axis=1)
        heads = HEADS if (use_attention and attention is None) else ("mask",)
        if mask is not None:
            heads = tuple(h for h in heads if h != "mask")
        outputs, net_cache = igcrn_forward(feats, weights, training=training, heads=heads)
    if mask is None:
        mask = outputs.mask
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), (b, f, t))

    yv = np.moveaxis(spec_data, 1, -1)  # [B, F, T, M]
    r = scm.outer_products(yv)
    psi_s, psi_n = scm.masked_iscms(r, mask)

    a_s = a_n = None
    if use_attention:
        if attention is not None:
            a_s, a_n = (np.broadcast_to(a, (b, f, t, t)) for a in attention)
        else:
            a_s = isam.attention_weights(outputs.q_speech, outputs.k_speech, causal=cfg.causal)
            a_n = isam.attention_weights(outputs.q_noise, outputs.k_noise, causal=cfg.causal)
        phi_s = scm.attention_scm(a_s, psi_s)
        phi_n = scm.attention_scm(a_n, psi_n)
    else:
        phi_s = scm.estimate_scm(psi_s, cfg.estimator, causal=cfg.causal)
        phi_n = scm.estimate_scm(psi_n, cfg.estimator, causal=cfg.causal)

    bf = mvdr.mvdr_weights(phi_s, phi_n, cfg.ref_channel, cfg.loading, keep_cache=keep_cache)
    s_hat = mvdr.apply_beamformer(bf, yv)
    signals = istft(s_hat, cfg.stft)
    cache = {
        "yv": yv, "r": r, "psi_s": psi_s, "psi_n": psi_n, "a_s": a_s, "a_n": a_n,
        "bf": bf, "outputs": outputs, "net": net_cache, "mask": mask, "shape": (b, m, f, t),
    }
    return signals, cache


def _backward(cache, g_signals, cfg: EnhanceConfig):
    """Parameter gradients given d(loss)/d(output samples) for a cached attention-estimator forward."""
    b, m, f, t = cache["shape"]
    g_shat = istft_adjoint(g_signals, cfg.stft, t)
    g_w = mvdr.apply_beamformer_backward(cache["yv"], g_shat)
    g_phi_s, g_phi_n = mvdr.mvdr_backward(cache["bf"], g_w)
    g_as, g_psi_s = scm.attention_scm_backward(cache["a_s"], cache["psi_s"], g_phi_s)
    g_an, g_psi_n = scm.attention_scm_backward(cache["a_n"], cache["psi_n"], g_phi_n)
    r = np.conj(cache["r"])
    g_mask = np.sum(g_psi_s * r, axis=(-2, -1)).real - np.sum(g_psi_n * r, axis=(-2, -1)).real
    out = cache["outputs"]
    g_qs, g_ks = isam.attention_backward(cache["a_s"], g_as, out.q_speech, out.k_speech)
    g_qn, g_kn = isam.attention_backward(cache["a_n"], g_an, out.q_noise, out.k_noise)
    return igcrn_backward(
        cache["net"],
        {"mask": g_mask, "q_speech": g_qs, "k_speech": g_ks, "q_noise": g_qn, "k_noise": g_kn},
    )


def _spectra(mixtures, cfg: EnhanceConfig):
    return np.stack([stft(x, cfg.stft).data for x in mixtures])


def enhance_batch(mixtures, weights: ModelWeights | None, cfg: EnhanceConfig, mask=None, attention=None):
    """Enhance a batch of equal-length [M x L] mixtures; returns ([B x L] signals, diagnostics)."""
    mixtures = np.asarray(mixtures, dtype=np.float64)
    spec = _spectra(mixtures, cfg)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if np.any(mask < 0) or np.any(mask > 1):
            raise ValueError("mask values must lie in [0, 1]")
    signals, cache = _forward(spec, weights, cfg, mask=mask, attention=attention)
    length = mixtures.shape[-1]
    out = np.zeros((len(mixtures), length))
    out[:, :signals.shape[-1]] = signals
    fallback = cache["bf"].fallback
    diag = {
        "fallback_bins": int(np.count_nonzero(fallback)),
        "fallback_bin_ratio": float(np.mean(fallback)),
        "estimator": cfg.estimator.kind,
        "causal": cfg.causal,
    }
    if cache["a_s"] is not None:
        diag["attention_entropy_speech"] = isam.attention_entropy(cache["a_s"]).tolist()
        diag["attention_entropy_noise"] = isam.attention_entropy(cache["a_n"]).tolist()
    diag["mask_mean"] = float(np.mean(cache["mask"]))
    return out, diag


def enhance(mixture, weights: ModelWeights | None, cfg: EnhanceConfig | None = None, mask=None, attention=None):
    """Enhance one [M x L] mixture; returns (mono samples [L], diagnostics).

    ``mask`` ([F x T]) replaces the network mask, e.g. with :func:`oracle_mask`;
    ``attention`` = (A_speech, A_noise), each [F x T x T], replaces the attention weights.
    Trailing samples past the last full frame are returned as zeros.
    """
    cfg = cfg or EnhanceConfig()
    mixture = np.asarray(mixture, dtype=np.float64)
    if mixture.ndim != 2:
        raise ValueError("mixture must be [M x L]")
    if weights is not None and mixture.shape[0] != weights.arch.num_mics:
        raise ValueError(f"mixture has {mixture.shape[0]} channels, model expects {weights.arch.num_mics}")
    if weights is None and (mask is None or (cfg.estimator.kind == "attention" and attention is None)):
        raise ValueError("weights are required unless mask (and attention) are supplied")
    if not 0 <= cfg.ref_channel < mixture.shape[0]:
        raise ValueError(f"reference channel {cfg.ref_channel} out of range")
    out, diag = enhance_batch(mixture[None], weights, cfg, mask=mask, attention=attention)
    return out[0], diag


def metric_report(enhanced, scene: Scene, cfg: EnhanceConfig, runtime_ms: float | None = None, diag=None) -> dict:
    region = valid_region(cfg.stft, scene.mixture.shape[-1])
    ref = scene.speech_image[cfg.ref_channel][region]
    report = {
        "si_sdr_in": si_sdr(scene.mixture[cfg.ref_channel][region], ref),
        "si_sdr_out": si_sdr(enhanced[region], ref),
        "snr_loss": snr_loss(enhanced[region], ref),
        "fallback_bin_ratio": (diag or {}).get("fallback_bin_ratio"),
        "runtime_ms": runtime_ms,
    }
    return report


def loss_and_grads(weights: ModelWeights, scenes, cfg: EnhanceConfig, training=False, with_grads=True):
    """Mean ``snr_loss`` over ``scenes`` against the reference-channel speech image, and its gradients."""
    if cfg.estimator.kind != "attention":
        raise ValueError("gradients are only defined for the attention estimator")
    mixtures = np.stack([sc.mixture for sc in scenes])
    spec = _spectra(mixtures, cfg)
    signals, cache = _forward(spec, weights, cfg, training=training, keep_cache=with_grads)
    region = valid_region(cfg.stft, mixtures.shape[-1])
    losses, g_sig = [], np.zeros_like(signals)
    for i, sc in enumerate(scenes):
        ref = sc.speech_image[cfg.ref_channel][region]
        losses.append(snr_loss(signals[i][region], ref))
        if with_grads:
            g_sig[i][region] = snr_loss_grad(signals[i][region], ref) / len(scenes)
    loss = float(np.mean(losses))
    grads = _backward(cache, g_sig, cfg) if with_grads else None
    return loss, grads, cache


def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "dec":
        return ".".join(parts[:3])
    if parts[0] == "linear":
        return "linear"
    return ".".join(parts[:2])


def tiny_scene(seed: int = 0, arch: IgcrnConfig = TINY_ARCH, stft_cfg: StftConfig = TINY_STFT, frames: int = 6) -> Scene:
    """Random rank-1 speech plus independent noise, sized for the gradient-check preset."""
    rng = np.random.default_rng(seed)
    length = stft_cfg.output_length(frames)
    src = rng.standard_normal(length)
    gains = 1.0 + 0.3 * rng.standard_normal(arch.num_mics)
    speech = np.stack([g * np.roll(src, k) for k, g in enumerate(gains)])
    noise = rng.standard_normal((arch.num_mics, length))
    return mix_at_snr(speech, noise, 0.0)


def toy_scenes(num: int = 10, duration: float = 0.25, seed: int = 0, arch: IgcrnConfig = TOY_ARCH,
               sample_rate: int = 16000) -> list[Scene]:
    """Fixed synthetic training set: moving synthetic talkers on a 5 cm circle."""
    geom = circular_array(arch.num_mics, 0.05)
    scenes = []
    for i in range(num):
        speech = synth_speech(duration, sample_rate, seed=seed * 1000 + i)
        noise = synth_noise(duration, sample_rate, seed=seed * 1000 + 500 + i)
        cfg = SceneConfig(geometry=geom, seed=seed * 1000 + i, sample_rate=sample_rate)
        scenes.append(make_scene(cfg, speech, noise))
    return scenes

def grad_check(weights: ModelWeights, scene: Scene, cfg: EnhanceConfig, eps_fd: float = 1e-5,
               training: bool = False, names=None) -> dict:
    """Max relative error between backprop and central finite differences, per parameter group.

    Relative error of a group is ``max|g_bp - g_fd| / max(max|g_bp|, max|g_fd|, 1e-12)``.
    """
    weights = weights.copy()
    for k in weights.params:
        weights.params[k] = np.asarray(weights.params[k], dtype=np.float64)
    _, grads, cache = loss_and_grads(weights, [scene], cfg, training=training)
    if cache["bf"].fallback_count:
        raise ValueError("non-differentiable configuration; adjust scene (MVDR fallback bins present)")
    names = names or list(weights.params)
    numeric = {}
    for name in names:
        p = weights.params[name]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps_fd * max(1.0, abs(orig))
            flat[i] = orig + h
            lp, _, _ = loss_and_grads(weights, [scene], cfg, training=training, with_grads=False)
            flat[i] = orig - h
            lm, _, _ = loss_and_grads(weights, [scene], cfg, training=training, with_grads=False)
            flat[i] = orig
            g.reshape(-1)[i] = (lp - lm) / (2 * h)
        numeric[name] = g
    errors: dict[str, float] = {}
    scale: dict[str, float] = {}
    diff: dict[str, float] = {}
    for name in names:
        grp = _group(name)
        diff[grp] = max(diff.get(grp, 0.0), float(np.max(np.abs(grads[name] - numeric[name]))))
        scale[grp] = max(scale.get(grp, 0.0), float(np.max(np.abs(grads[name]))), float(np.max(np.abs(numeric[name]))))
    for grp in diff:
        errors[grp] = diff[grp] / max(scale[grp], 1e-12)
    return errors


def smooth(trace, window: int = 25) -> np.ndarray:
    x = np.asarray(trace, dtype=np.float64)
    if len(x) < window:
        window = max(len(x), 1)
    return np.convolve(x, np.ones(window) / window, mode="valid")


def train_toy(train_scenes, weights: ModelWeights, cfg: TrainConfig | None = None,
              enhance_cfg: EnhanceConfig | None = None, progress=None):
    """Adam on the mean SNR loss; returns (trained weights, per-step loss trace).

    Batches are drawn without replacement from a seeded permutation; when the set
    is no larger than ``batch_size`` every step uses the full set.
    """
    cfg = cfg or TrainConfig()
    enhance_cfg = enhance_cfg or EnhanceConfig(stft=TOY_STFT)
    if enhance_cfg.estimator.kind != "attention":
        raise ValueError("training requires the attention estimator")
    weights = weights.copy()
    for k in weights.params:
        weights.params[k] = np.asarray(weights.params[k], dtype=np.float64)
    for k in weights.buffers:
        weights.buffers[k] = np.asarray(weights.buffers[k], dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    m1 = {k: np.zeros_like(v) for k, v in weights.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in weights.params.items()}
    scenes = list(train_scenes)
    order: list[int] = []
    trace = []
    for step in range(cfg.steps):
        if len(scenes) <= cfg.batch_size:
            batch = scenes
        else:
            if len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(scenes)).tolist())
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            batch = [scenes[i] for i in idx]
        loss, grads, cache = loss_and_grads(weights, batch, enhance_cfg, training=True)
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step} (loss {loss})")
        trace.append(loss)
        t = step + 1
        for k, g in grads.items():
            m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * g
            m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * g * g
            mhat = m1[k] / (1 - cfg.beta1 ** t)
            vhat = m2[k] / (1 - cfg.beta2 ** t)
            weights.params[k] = weights.params[k] - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        update_running_stats(weights, cache["net"], cfg.bn_momentum)
        if progress is not None:
            progress(step, loss)
    return weights, np.asarray(trace)


def with_estimator(cfg: EnhanceConfig, kind: str, **kw) -> EnhanceConfig:
    return replace(cfg, estimator=scm.EstimatorConfig(kind=kind, **kw))
