"""Diffusion autoencoding by filling the forward-process posterior mean gap,
with an exact Gaussian-mixture oracle for desk-scale verification."""

__version__ = "0.1.0"
