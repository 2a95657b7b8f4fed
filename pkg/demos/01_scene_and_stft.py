"""
Simulating a moving talker and round-tripping it through the STFT
==================================================================

"""

import numpy as np

from abicmvdr.scene import SceneConfig, circular_array, make_scene, synth_noise, synth_speech
from abicmvdr.spectral import StftConfig, istft, stft

# a 5-microphone circle of radius 10 cm, talker walking at a fixed 0.5 m/s
geometry = circular_array(5, 0.1)
cfg = SceneConfig(geometry=geometry, snr_db=0.0, seed=7, speed_range=(0.5, 0.5))
scene = make_scene(cfg, synth_speech(2.0, seed=1), synth_noise(2.0, seed=2))

waypoints = scene.metadata["trajectory"]["waypoints"]
start, end = np.array(waypoints[0][1]), np.array(waypoints[-1][1])
print("path length %.3f m over %.2f s" % (np.linalg.norm(end - start), waypoints[-1][0]))

# the mixture is exactly speech image plus noise image
print("additivity residual", np.abs(scene.mixture - scene.speech_image - scene.noise_image).max())
ref_snr = 10 * np.log10(np.mean(scene.speech_image[0] ** 2) / np.mean(scene.noise_image[0] ** 2))
print("reference-channel SNR %.3f dB" % ref_snr)

# 320-sample sqrt-Hann frames, 50 % overlap: 161 bins
st = StftConfig()
spec = stft(scene.mixture, st)
print("spectrogram shape", spec.data.shape)

# synthesis reconstructs everything away from the first and last frame
y = istft(spec)
inner = slice(st.frame_length, y.shape[-1] - st.frame_length)
err = np.linalg.norm(y[:, inner] - scene.mixture[:, inner]) / np.linalg.norm(scene.mixture[:, inner])
print("interior round-trip error %.2e" % err)
