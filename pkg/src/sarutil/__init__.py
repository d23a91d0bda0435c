"""Utility scoring and counterfactual explanation for simulated SAR target chips."""

__version__ = "0.1.0"
