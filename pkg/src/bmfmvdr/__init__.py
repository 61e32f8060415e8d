"""Binaural multi-frame MVDR speech enhancement toolkit."""

from .mfmvdr import (FilterOrder, FilterParams, SpeechStcv, apply_filter,
                     apply_min_gain, build_inverse_noise_stcm, build_speech_stcv,
                     enhance_utterance, mfmvdr_weights, stack_multiframe)
from .stft import ComplexSpectrogram, StftConfig, analyze, synthesize

__all__ = [
    "ComplexSpectrogram",
    "FilterOrder",
    "FilterParams",
    "SpeechStcv",
    "StftConfig",
    "analyze",
    "apply_filter",
    "apply_min_gain",
    "build_inverse_noise_stcm",
    "build_speech_stcv",
    "enhance_utterance",
    "mfmvdr_weights",
    "stack_multiframe",
    "synthesize",
]

__version__ = "0.1.0"
