"""Denoising padded autoencoder stack for transient diagnosis.

Subpackages cover the full pipeline: a tape-based tensor engine, synthetic
transient data with noise/masking perturbations, the autoencoder itself,
training, downstream diagnosis heads, metrics, and post-hoc importance
analysis.
"""

__version__ = "0.1.0"
