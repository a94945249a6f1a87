"""Paired-network discrepancy dynamics: training, stopping, kernels, noise estimation."""

__version__ = "0.1.0"
