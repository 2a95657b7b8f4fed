"""
The backbone network, its size, and a finite-difference gradient check
======================================================================

"""

import numpy as np

from abicmvdr import pipeline as P
from abicmvdr.igcrn import IgcrnConfig, igcrn_forward, init_weights, mac_count, parameter_count

# default configuration: 5 mics, 24 channels, 6 encoder layers, 2-layer LSTM of 48
arch = IgcrnConfig()
print("parameters", parameter_count(arch))
macs = mac_count(arch, 1.0)
print("network MACs/s %.3f G, attention MACs/s %.3f G" % (macs["network"] / 1e9, macs["attention"] / 1e9))

# one forward pass on random features: [2M x F x T]
weights = init_weights(arch, seed=0)
out, _ = igcrn_forward(np.random.default_rng(0).standard_normal((10, 161, 8)), weights)
print("mask", out.mask.shape, "query", out.q_speech.shape)

# the tiny preset is small enough for central differences on every parameter
tiny = init_weights(P.TINY_ARCH, seed=0)
scene = P.tiny_scene(0)
errors = P.grad_check(tiny, scene, P.EnhanceConfig(stft=P.TINY_STFT, loading=1e-3))
for group, err in sorted(errors.items(), key=lambda kv: -kv[1])[:5]:
    print("  %-20s %.2e" % (group, err))
print("max relative error %.2e" % max(errors.values()))
