"""Bayesian phylogenetics from AFLP markers under the Sub-ID model."""

__version__ = "0.1.0"
