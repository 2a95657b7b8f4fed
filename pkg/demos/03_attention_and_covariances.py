"""
Attention weights as covariance smoothers
=========================================

"""

import numpy as np

from abicmvdr.isam import attention_weights
from abicmvdr.scm import attention_scm, exponential_attention, instantaneous_scm, online_scm

rng = np.random.default_rng(0)

# zero queries and keys: causal rows are running means
z = np.zeros((1, 4, 2))
print(np.round(attention_weights(z, z, causal=True)[0], 3))

# random queries and keys; future frames get exactly zero weight
q, k = rng.standard_normal((2, 3, 6, 4))
a = attention_weights(q, k, causal=True)
print("row sums", a.sum(-1)[0], "future mass", np.triu(a, 1).max())

# masked instantaneous covariances for a 3-mic, 3-bin, 6-frame spectrogram
y = rng.standard_normal((3, 3, 6)) + 1j * rng.standard_normal((3, 3, 6))
mask = rng.uniform(size=(3, 6))
psi_s = instantaneous_scm(y, mask, "speech")
psi_n = instantaneous_scm(y, mask, "noise")
phi_s = attention_scm(a, psi_s)
print("speech SCM at f=0, t=5\n", np.round(phi_s[0, 5], 3))

# exponential rows turn the attention sum into the classic online recursion
rows = np.broadcast_to(exponential_attention(6, 0.9), (3, 6, 6))
print("online vs attention", np.abs(attention_scm(rows, psi_n) - online_scm(psi_n, 0.9)).max())
