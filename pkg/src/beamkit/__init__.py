"""Distortionless beamforming with joint steering estimation by constrained ICA,
in batch and frame-online (RLS) form."""

from .beamformer import accumulate_wscm, apply_filter, distortionless_filter, run_batch
from .errors import BeamkitError, ConfigError, ConvergenceError, FormatError, NumericalError
from .ica import ConstraintMode, run_batch_ica
from .maskio import read_mask, read_steering, write_mask, write_steering
from .models import BeamformerVariant, ModelParams
from .online import OnlineBeamformer, OnlineParams, run_online
from .scene import SceneSpec, SourceSpec, NoiseSpec, ArrayGeometry, synthesize, oracle_mask, metrics
from .stft import Spectrogram, StftConfig, istft, stft

__version__ = "0.1.0"

__all__ = [
    "BeamformerVariant", "ModelParams", "StftConfig", "Spectrogram", "stft", "istft",
    "accumulate_wscm", "apply_filter", "distortionless_filter", "run_batch",
    "ConstraintMode", "run_batch_ica", "OnlineBeamformer", "OnlineParams", "run_online",
    "SceneSpec", "SourceSpec", "NoiseSpec", "ArrayGeometry", "synthesize", "oracle_mask",
    "metrics", "read_mask", "write_mask", "read_steering", "write_steering",
    "BeamkitError", "ConfigError", "ConvergenceError", "FormatError", "NumericalError",
]
