"""Entropy-regularized policy optimization as a Wasserstein-2 gradient flow."""

__version__ = "0.1.0"
