"""
Proper scoring rules for Gaussian predictive distributions.
"""

import numpy as np
from scipy.stats import norm

Z_95 = 1.959964
ALPHA_95 = 0.05


def _check_sd(sd):
    sd = np.asarray(sd, dtype=float)
    if np.any(~(sd > 0)):
        raise ValueError("predictive sd must be positive")
    return sd


def rmspe(pred_means, truth):
    pred_means, truth = np.asarray(pred_means, dtype=float), np.asarray(truth, dtype=float)
    if pred_means.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred_means.shape} vs {truth.shape}")
    if pred_means.size == 0:
        raise ValueError("rmspe of an empty vector")
    return float(np.sqrt(np.mean((pred_means - truth) ** 2)))


def crps_gaussian(mu, sd, z):
    """Closed-form CRPS of N(mu, sd^2) at z (elementwise)."""
    sd = _check_sd(sd)
    zt = (np.asarray(z, dtype=float) - mu) / sd
    return sd * (zt * (2 * norm.cdf(zt) - 1) + 2 * norm.pdf(zt) - 1 / np.sqrt(np.pi))


def interval_score_95(mu, sd, z):
    """Interval score of the central 95% interval mu -/+ Z_95 sd."""
    sd = _check_sd(sd)
    z = np.asarray(z, dtype=float)
    lo, hi = mu - Z_95 * sd, mu + Z_95 * sd
    penalty = 2 / ALPHA_95
    return (hi - lo) + penalty * np.maximum(lo - z, 0) + penalty * np.maximum(z - hi, 0)


def score_predictions(mean, sd, truth):
    """Unweighted means of the three scores over a validation set."""
    mean, sd, truth = (np.asarray(a, dtype=float) for a in (mean, sd, truth))
    return {
        "rmspe": rmspe(mean, truth),
        "crps": float(np.mean(crps_gaussian(mean, sd, truth))),
        "interval_score": float(np.mean(interval_score_95(mean, sd, truth))),
        "n": int(truth.size),
    }
