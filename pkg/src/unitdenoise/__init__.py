"""Noise- and reverberation-robust discrete speech units.

Augment clean audio, quantise layered encoder features with K-means, train a
compact CTC/attention denoiser that predicts clean deduplicated unit
sequences from distorted inputs, and measure Unit Error Rate per acoustic
condition, including few-shot adaptation to new noise environments.
"""

from . import audio, augment, config, denoiser, metrics, pipeline, pseudo_ssl, quantizer, substrate

__all__ = [
    "audio", "augment", "config", "denoiser", "metrics", "pipeline",
    "pseudo_ssl", "quantizer", "substrate",
]

__version__ = "0.1.0"
