"""Attention-weighted MVDR beamforming for multichannel speech enhancement."""
from .spectral import ComplexSpectrogram, StftConfig, istft, stft
from .scene import ArrayGeometry, Scene, SceneConfig, Trajectory, circular_array, make_scene, mix_at_snr, render_moving_source
from .igcrn import IgcrnConfig, ModelWeights, NetworkOutputs, igcrn_forward, init_weights, mac_count, parameter_count
from .isam import attention_weights
from .scm import EstimatorConfig, attention_scm, blockwise_scm, instantaneous_scm, online_scm
from .mvdr import BeamformerWeights, apply_beamformer, mvdr_weights
from .weights_io import load_weights, save_weights
from .pipeline import EnhanceConfig, TrainConfig, enhance, grad_check, oracle_mask, si_sdr, snr_loss, train_toy

__version__ = "0.1.0"
