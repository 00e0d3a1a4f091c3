"""Spectral harmonization toolkit: PSD analysis, Householder harmonizer,
resonator attention, and a desk-scale encoder-decoder forecaster."""

__version__ = "0.1.0"
