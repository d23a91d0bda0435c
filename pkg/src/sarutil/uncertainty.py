"""Predictive uncertainty of class probabilities and azimuth vectors from T samples."""

import numpy as np
import torch

from .errors import InvalidArgument

SIMPLEX_TOL = 1e-5


def class_uncertainty(samples):
    """Aleatoric and epistemic covariance of sampled class probabilities.

    ``samples`` has shape (T, C). Returns ``(aleatoric, epistemic, u_c)`` where
    ``u_c`` is the sum of both traces.
    """
    y = np.asarray(samples, dtype=np.float64)
    if y.ndim != 2:
        raise InvalidArgument(f"expected (T, C) samples, got shape {y.shape}")
    if y.shape[0] < 2:
        raise InvalidArgument("need at least two samples (T >= 2)")
    if np.any(y < -SIMPLEX_TOL) or np.any(np.abs(y.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise InvalidArgument("class samples must lie on the probability simplex")
    ybar = y.mean(axis=0)
    aleatoric = np.diag(ybar) - np.einsum("ti,tj->ij", y, y) / len(y)
    d = y - ybar
    epistemic = np.einsum("ti,tj->ij", d, d) / len(y)
    return aleatoric, epistemic, float(np.trace(aleatoric) + np.trace(epistemic))


def angle_uncertainty(samples):
    """Per-component variance of sampled azimuth vectors, summed. ``samples`` is (T, 2)."""
    v = np.asarray(samples, dtype=np.float64)
    if v.ndim != 2 or len(v) < 2:
        raise InvalidArgument(f"expected (T>=2, 2) samples, got shape {v.shape}")
    return float(np.sum(np.mean((v - v.mean(axis=0)) ** 2, axis=0)))


# Differentiable batched versions; inputs are (T, N, C) and (T, N, 2).


def class_uncertainty_torch(probs):
    ybar = probs.mean(dim=0)
    alea = (1.0 - (probs * probs).sum(dim=-1)).mean(dim=0)
    epi = ((probs - ybar) ** 2).sum(dim=-1).mean(dim=0)
    return alea + epi


def angle_uncertainty_torch(vecs):
    return ((vecs - vecs.mean(dim=0)) ** 2).mean(dim=0).sum(dim=-1)


def predictive_entropy_torch(probs):
    return -(probs * torch.log(probs.clamp_min(1e-12))).sum(dim=-1)
