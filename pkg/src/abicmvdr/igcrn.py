"""Inplace convolutional recurrent backbone: one encoder, a frequency-shared LSTM
trunk and five skip-connected decoders (mask + query/key for two attention heads).

Layer naming (``L`` = ``num_layers``):

- ``enc.{i}``       conv + batch norm + ELU, i = 0..L-1
- ``lstm.{l}``      LSTM layers shared across frequency bins
- ``linear``        hidden -> channels, applied per (frequency, frame)
- ``dec.{head}.{i}`` deconv over ``concat(decoder, enc.{i})``, i = L-1..0;
  i = 0 is the output layer (sigmoid for ``mask``, tanh for the query/key heads)
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers as L

__all__ = [
    "IgcrnConfig",
    "LayerSpec",
    "ModelWeights",
    "NetworkOutputs",
    "HEADS",
    "architecture",
    "parameter_shapes",
    "buffer_shapes",
    "init_weights",
    "igcrn_forward",
    "igcrn_backward",
    "update_running_stats",
    "inplace_conv_forward",
    "channelwise_lstm_forward",
    "parameter_count",
    "parameter_breakdown",
    "mac_count",
    "MissingTensorError",
    "UnexpectedTensorError",
    "ShapeMismatchError",
]

HEADS = ("mask", "q_speech", "k_speech", "q_noise", "k_noise")


class MissingTensorError(KeyError):
    pass


class UnexpectedTensorError(KeyError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class IgcrnConfig:
    num_mics: int = 5
    channels: int = 24
    num_layers: int = 6
    kernel: int = 5
    lstm_hidden: int = 48
    lstm_layers: int = 2
    attn_dim: int = 24

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("frequency kernel extent must be odd")
        if min(self.num_mics, self.channels, self.num_layers, self.lstm_hidden, self.lstm_layers, self.attn_dim) < 1:
            raise ValueError("all architecture sizes must be positive")

    @property
    def in_channels(self) -> int:
        return 2 * self.num_mics

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple = (5, 1)
    stride: tuple = (1, 1)
    activation: str = "none"
    batch_norm: bool = False

    def __post_init__(self):
        if self.kind in ("inplace_conv", "inplace_deconv"):
            if self.stride != (1, 1):
                raise ValueError("inplace layers require stride (1, 1)")
            if self.kernel[0] % 2 == 0:
                raise ValueError("frequency kernel extent must be odd")


def architecture(arch: IgcrnConfig) -> list[tuple[str, LayerSpec]]:
    k = (arch.kernel, 1)
    c = arch.channels
    specs = []
    for i in range(arch.num_layers):
        cin = arch.in_channels if i == 0 else c
        specs.append((f"enc.{i}", LayerSpec("inplace_conv", cin, c, k, activation="elu", batch_norm=True)))
    for l in range(arch.lstm_layers):
        cin = c if l == 0 else arch.lstm_hidden
        specs.append((f"lstm.{l}", LayerSpec("lstm", cin, arch.lstm_hidden, (1, 1))))
    specs.append(("linear", LayerSpec("channel_linear", arch.lstm_hidden, c, (1, 1))))
    for head in HEADS:
        for i in reversed(range(arch.num_layers)):
            if i > 0:
                spec = LayerSpec("inplace_deconv", 2 * c, c, k, activation="elu", batch_norm=True)
            else:
                out = 1 if head == "mask" else arch.attn_dim
                act = "sigmoid" if head == "mask" else "tanh"
                spec = LayerSpec("inplace_deconv", 2 * c, out, k, activation=act)
            specs.append((f"dec.{head}.{i}", spec))
    return specs


def parameter_shapes(arch: IgcrnConfig) -> dict[str, tuple]:
    shapes = {}
    for name, s in architecture(arch):
        if s.kind == "inplace_conv":
            shapes[f"{name}.weight"] = (s.out_channels, s.in_channels, s.kernel[0], 1)
            shapes[f"{name}.bias"] = (s.out_channels,)
        elif s.kind == "inplace_deconv":
            shapes[f"{name}.weight"] = (s.in_channels, s.out_channels, s.kernel[0], 1)
            shapes[f"{name}.bias"] = (s.out_channels,)
        elif s.kind == "lstm":
            h = s.out_channels
            shapes[f"{name}.weight_ih"] = (4 * h, s.in_channels)
            shapes[f"{name}.weight_hh"] = (4 * h, h)
            shapes[f"{name}.bias"] = (4 * h,)
        elif s.kind == "channel_linear":
            shapes[f"{name}.weight"] = (s.out_channels, s.in_channels)
            shapes[f"{name}.bias"] = (s.out_channels,)
        if s.batch_norm:
            shapes[f"{name}.bn.weight"] = (s.out_channels,)
            shapes[f"{name}.bn.bias"] = (s.out_channels,)
    return shapes


def buffer_shapes(arch: IgcrnConfig) -> dict[str, tuple]:
    shapes = {}
    for name, s in architecture(arch):
        if s.batch_norm:
            shapes[f"{name}.bn.running_mean"] = (s.out_channels,)
            shapes[f"{name}.bn.running_var"] = (s.out_channels,)
    return shapes


@dataclass
class ModelWeights:
    """Trainable ``params`` plus batch-norm running statistics in ``buffers``."""

    arch: IgcrnConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def validate(self) -> None:
        for kind, expected, have in (
            ("parameter", parameter_shapes(self.arch), self.params),
            ("buffer", buffer_shapes(self.arch), self.buffers),
        ):
            missing = sorted(set(expected) - set(have))
            if missing:
                raise MissingTensorError(f"missing {kind} tensors: {', '.join(missing)}")
            extra = sorted(set(have) - set(expected))
            if extra:
                raise UnexpectedTensorError(f"unknown {kind} tensors: {', '.join(extra)}")
            for name, shape in expected.items():
                if tuple(np.shape(have[name])) != shape:
                    raise ShapeMismatchError(f"{name}: shape {np.shape(have[name])}, expected {shape}")

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.arch,
            {k: np.array(v, copy=True) for k, v in self.params.items()},
            {k: np.array(v, copy=True) for k, v in self.buffers.items()},
        )

    def num_parameters(self) -> int:
        return int(sum(np.size(v) for v in self.params.values()))


def init_weights(arch: IgcrnConfig | None = None, seed: int = 0, dtype=np.float64) -> ModelWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; BN at identity."""
    arch = arch or IgcrnConfig()
    rng = np.random.default_rng(seed)
    params = {}
    specs = dict(architecture(arch))
    for name, shape in parameter_shapes(arch).items():
        layer = name.rsplit(".", 2)[0] if ".bn." in name else name.rsplit(".", 1)[0]
        s = specs[layer]
        if name.endswith("bn.weight"):
            params[name] = np.ones(shape, dtype=dtype)
            continue
        if name.endswith("bn.bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if s.kind == "lstm":
            fan_in = s.out_channels
        elif s.kind == "channel_linear":
            fan_in = s.in_channels
        else:
            fan_in = s.in_channels * s.kernel[0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    buffers = {
        name: (np.zeros(shape, dtype=dtype) if name.endswith("mean") else np.ones(shape, dtype=dtype))
        for name, shape in buffer_shapes(arch).items()
    }
    return ModelWeights(arch, params, buffers)


@dataclass
class NetworkOutputs:
    mask: np.ndarray  # [(B) x F x T], in [0, 1]
    q_speech: np.ndarray  # [(B) x F x T x D], in [-1, 1]
    k_speech: np.ndarray
    q_noise: np.ndarray
    k_noise: np.ndarray

    def head(self, name):
        return getattr(self, name)


def _get(weights: ModelWeights, name):
    try:
        return np.asarray(weights.params[name], dtype=np.float64)
    except KeyError:
        raise MissingTensorError(f"weight container is missing tensor {name!r}") from None


def _buf(weights: ModelWeights, name):
    try:
        return np.asarray(weights.buffers[name], dtype=np.float64)
    except KeyError:
        raise MissingTensorError(f"weight container is missing tensor {name!r}") from None


def _layer_forward(x, weights, name, spec: LayerSpec, training):
    w = _get(weights, f"{name}.weight")
    b = _get(weights, f"{name}.bias")
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatchError(f"{name}: expected {spec.in_channels} input channels, got {x.shape[1]}")
    if spec.kind == "inplace_conv":
        z, conv_cache = L.conv_forward(x, w, b)
    else:
        z, conv_cache = L.deconv_forward(x, w, b)
    bn_cache = None
    pre = z
    if spec.batch_norm:
        pre, bn_cache = L.bn_forward(
            z,
            _get(weights, f"{name}.bn.weight"),
            _get(weights, f"{name}.bn.bias"),
            _buf(weights, f"{name}.bn.running_mean"),
            _buf(weights, f"{name}.bn.running_var"),
            training,
        )
    y = L.activation_forward(pre, spec.activation)
    return y, (spec, conv_cache, bn_cache, pre, y)


def _layer_backward(gy, cache, name, grads):
    spec, conv_cache, bn_cache, pre, y = cache
    g = L.activation_backward(gy, pre, y, spec.activation)
    if spec.batch_norm:
        g, g_gamma, g_beta = L.bn_backward(g, bn_cache)
        grads[f"{name}.bn.weight"] = grads.get(f"{name}.bn.weight", 0) + g_gamma
        grads[f"{name}.bn.bias"] = grads.get(f"{name}.bn.bias", 0) + g_beta
    if spec.kind == "inplace_conv":
        g_x, g_w, g_b = L.conv_backward(g, conv_cache)
    else:
        g_x, g_w, g_b = L.deconv_backward(g, conv_cache)
    grads[f"{name}.weight"] = grads.get(f"{name}.weight", 0) + g_w
    grads[f"{name}.bias"] = grads.get(f"{name}.bias", 0) + g_b
    return g_x


def inplace_conv_forward(x, spec: LayerSpec, weight, bias, bn=None, training=False):
    """Single inplace (de)conv layer on [C_in x F x T] or [B x C_in x F x T].

    ``bn`` is an optional ``(gamma, beta, running_mean, running_var)`` tuple.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    expected = (
        (spec.out_channels, spec.in_channels, spec.kernel[0], 1)
        if spec.kind == "inplace_conv"
        else (spec.in_channels, spec.out_channels, spec.kernel[0], 1)
    )
    if np.shape(weight) != expected:
        raise ShapeMismatchError(f"layer {spec.kind}: weight shape {np.shape(weight)}, expected {expected}")
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatchError(f"layer {spec.kind}: expected {spec.in_channels} input channels, got {x.shape[1]}")
    fwd = L.conv_forward if spec.kind == "inplace_conv" else L.deconv_forward
    y, _ = fwd(x, np.asarray(weight, dtype=np.float64), np.asarray(bias, dtype=np.float64))
    if bn is not None:
        y, _ = L.bn_forward(y, *(np.asarray(v, dtype=np.float64) for v in bn), training)
    y = L.activation_forward(y, spec.activation)
    return y[0] if squeeze else y


def _trunk_forward(e_last, weights, arch):
    b, c, f, t = e_last.shape
    seq = e_last.transpose(0, 2, 3, 1).reshape(b * f, t, c)
    caches = []
    h = seq
    for l in range(arch.lstm_layers):
        h, cache = L.lstm_forward(
            h,
            _get(weights, f"lstm.{l}.weight_ih"),
            _get(weights, f"lstm.{l}.weight_hh"),
            _get(weights, f"lstm.{l}.bias"),
        )
        caches.append(cache)
    lw = _get(weights, "linear.weight")
    out = h @ lw.T + _get(weights, "linear.bias")
    r = out.reshape(b, f, t, -1).transpose(0, 3, 1, 2)
    return r, (caches, h, lw, (b, c, f, t))


def _trunk_backward(g_r, cache, arch, grads):
    caches, h, lw, (b, c, f, t) = cache
    g_out = g_r.transpose(0, 2, 3, 1).reshape(b * f, t, -1)
    grads["linear.weight"] = np.einsum("nto,nth->oh", g_out, h, optimize=True)
    grads["linear.bias"] = g_out.sum(axis=(0, 1))
    g_h = g_out @ lw
    for l in reversed(range(arch.lstm_layers)):
        g_h, g_ih, g_hh, g_b = L.lstm_backward(g_h, caches[l])
        grads[f"lstm.{l}.weight_ih"] = g_ih
        grads[f"lstm.{l}.weight_hh"] = g_hh
        grads[f"lstm.{l}.bias"] = g_b
    return g_h.reshape(b, f, t, c).transpose(0, 3, 1, 2)


def channelwise_lstm_forward(x, weights: ModelWeights) -> np.ndarray:
    """Frequency-shared LSTM stack + linear projection on [C x F x T] (or batched)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    r, _ = _trunk_forward(x, weights, weights.arch)
    return r[0] if squeeze else r


def igcrn_forward(features, weights: ModelWeights, training: bool = False, heads=HEADS):
    """Run the backbone on [2M x F x T] (or [B x 2M x F x T]) real/imag features.

    Returns ``(NetworkOutputs, cache)``; heads not listed in ``heads`` are returned as None.
    """
    arch = weights.arch
    x = np.asarray(features, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[1] != arch.in_channels:
        raise ShapeMismatchError(f"expected {arch.in_channels} feature channels (2 x {arch.num_mics} mics), got {x.shape[1]}")
    specs = dict(architecture(arch))
    enc, enc_caches = [], []
    h = x
    for i in range(arch.num_layers):
        h, cache = _layer_forward(h, weights, f"enc.{i}", specs[f"enc.{i}"], training)
        enc.append(h)
        enc_caches.append(cache)
    r, trunk_cache = _trunk_forward(enc[-1], weights, arch)
    outs, dec_caches = {}, {}
    for head in heads:
        d = r
        caches = []
        for i in reversed(range(arch.num_layers)):
            name = f"dec.{head}.{i}"
            d, cache = _layer_forward(np.concatenate([d, enc[i]], axis=1), weights, name, specs[name], training)
            caches.append(cache)
        dec_caches[head] = caches
        outs[head] = d[:, 0] if head == "mask" else d.transpose(0, 2, 3, 1)
    result = {k: (None if k not in outs else (outs[k][0] if squeeze else outs[k])) for k in HEADS}
    cache = {
        "enc": enc_caches,
        "trunk": trunk_cache,
        "dec": dec_caches,
        "squeeze": squeeze,
        "arch": arch,
        "training": training,
    }
    return NetworkOutputs(**result), cache


def igcrn_backward(cache, grad_outputs: dict) -> dict:
    """Parameter gradients from gradients w.r.t. the network outputs.

    ``grad_outputs`` maps head names to arrays shaped like the outputs; missing heads
    contribute nothing and their decoder parameters get exact zero gradients.
    """
    arch = cache["arch"]
    c = arch.channels
    grads: dict = {}
    g_r = 0.0
    g_enc = [0.0] * arch.num_layers
    for head, caches in cache["dec"].items():
        g = grad_outputs.get(head)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if cache["squeeze"]:
            g = g[None]
        g = g[:, None] if head == "mask" else g.transpose(0, 3, 1, 2)
        # caches are stored in application order (i = L-1 .. 0)
        for i in range(arch.num_layers):
            g_in = _layer_backward(g, caches[arch.num_layers - 1 - i], f"dec.{head}.{i}", grads)
            g = g_in[:, :c]
            g_enc[i] = g_enc[i] + g_in[:, c:]
        g_r = g_r + g
    g_e = _trunk_backward(g_r, cache["trunk"], arch, grads) if not np.isscalar(g_r) else None
    for i in reversed(range(arch.num_layers)):
        g_here = g_enc[i]
        if g_e is not None:
            g_here = g_here + g_e
        if np.isscalar(g_here):
            break
        g_e = _layer_backward(g_here, cache["enc"][i], f"enc.{i}", grads)
    for name, shape in parameter_shapes(arch).items():
        if name not in grads:
            grads[name] = np.zeros(shape)
    return grads


def update_running_stats(weights: ModelWeights, cache, momentum: float = 0.9) -> None:
    """Fold batch statistics from a training-mode forward into the running buffers."""
    if not cache["training"]:
        return
    layer_caches = [(f"enc.{i}", c) for i, c in enumerate(cache["enc"])]
    arch = cache["arch"]
    for head, caches in cache["dec"].items():
        layer_caches += [(f"dec.{head}.{i}", c) for c, i in zip(caches, reversed(range(arch.num_layers)))]
    for name, (_, _, bn_cache, _, _) in layer_caches:
        if bn_cache is None:
            continue
        mean, var = bn_cache[4], bn_cache[5]
        for key, stat in (("running_mean", mean), ("running_var", var)):
            buf = f"{name}.bn.{key}"
            weights.buffers[buf] = momentum * weights.buffers[buf] + (1 - momentum) * stat


def parameter_breakdown(arch: IgcrnConfig | None = None) -> dict[str, int]:
    """Trainable parameter count per layer."""
    arch = arch or IgcrnConfig()
    out: dict[str, int] = {}
    for name, shape in parameter_shapes(arch).items():
        layer = name.rsplit(".", 2)[0] if ".bn." in name else name.rsplit(".", 1)[0]
        out[layer] = out.get(layer, 0) + int(np.prod(shape))
    return out


def parameter_count(arch: IgcrnConfig | None = None) -> int:
    return sum(parameter_breakdown(arch).values())


def mac_count(arch: IgcrnConfig | None = None, duration_s: float = 1.0, sample_rate: int = 16000,
              frame_length: int = 320, hop: int = 160) -> dict:
    """Multiply-accumulates for ``duration_s`` seconds of audio.

    Convention: conv/deconv ``C_in*C_out*K*F*T``; LSTM ``4*(I*H + H*H)*F*T`` per layer;
    linear ``I*O*F*T``. Batch norm, activations and bias adds are not counted.
    Attention (two modules) is reported separately: ``F*T^2*D`` for the scores and
    ``F*T^2*M^2`` for the weighted SCM sum, each.
    """
    arch = arch or IgcrnConfig()
    f = frame_length // 2 + 1
    t = int(round(duration_s * sample_rate / hop))
    per_layer = {}
    for name, s in architecture(arch):
        if s.kind in ("inplace_conv", "inplace_deconv"):
            per_layer[name] = s.in_channels * s.out_channels * s.kernel[0] * f * t
        elif s.kind == "lstm":
            per_layer[name] = 4 * (s.in_channels * s.out_channels + s.out_channels ** 2) * f * t
        elif s.kind == "channel_linear":
            per_layer[name] = s.in_channels * s.out_channels * f * t
    network = sum(per_layer.values())
    attn = 2 * (f * t * t * arch.attn_dim + f * t * t * arch.num_mics ** 2)
    return {"network": network, "attention": attn, "per_layer": per_layer, "frames": t, "bins": f}
