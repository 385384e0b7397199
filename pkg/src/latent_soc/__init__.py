"""Simulation-free latent SDE inference and masked self-supervised pre-training."""

__version__ = "0.1.0"
