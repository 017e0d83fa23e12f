"""Consistency-regularized Wasserstein BiGAN for one-class visual anomaly detection."""

__version__ = '0.1.0'
