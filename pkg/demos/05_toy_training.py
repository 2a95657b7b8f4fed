"""
Training a small model on synthetic scenes
==========================================

Pass a step count as the first argument (default 60).
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from abicmvdr import pipeline as P
from abicmvdr.igcrn import init_weights
from abicmvdr.weights_io import load_weights, save_weights

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60

# ten quarter-second moving-talker scenes on a 3-mic array
scenes = P.toy_scenes(10, 0.25, seed=0)
enhance_cfg = P.EnhanceConfig(stft=P.TOY_STFT)

weights, trace = P.train_toy(
    scenes, init_weights(P.TOY_ARCH, seed=0), P.TrainConfig(steps=steps, seed=0), enhance_cfg,
    progress=lambda step, loss: step % 10 == 0 and print("step %4d  loss %7.3f dB" % (step, loss)),
)
smoothed = P.smooth(trace)
print("smoothed loss %.3f -> %.3f" % (smoothed[0], smoothed[-1]))

# save, reload and enhance a held-out scene
path = Path(tempfile.mkdtemp()) / "toy.abic"
save_weights(weights, path)
reloaded = load_weights(path)
test = P.toy_scenes(1, 0.25, seed=9)[0]
out, diag = P.enhance(test.mixture, reloaded, enhance_cfg)
rep = P.metric_report(out, test, enhance_cfg, None, diag)
print("held-out SI-SDR %.2f -> %.2f dB" % (rep["si_sdr_in"], rep["si_sdr_out"]))
print("weights written to", path, "(%d bytes)" % path.stat().st_size)
