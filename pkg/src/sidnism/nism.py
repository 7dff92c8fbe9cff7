"""Illumination enhancement curves and recomposition."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TARGET_LEVEL = 0.8
ETA_MIN, ETA_MAX = 1.0, 20.0
MAX_KMEANS_SAMPLES = 65536


@dataclass(frozen=True)
class NismParams:
    T: float
    eta: float
    clamped: bool = False
    degenerate: bool = False


def kmeans_1d(values, k: int = 2, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm on scalars, seeded at evenly spaced quantiles.

    For ``k=2`` the seeds are the 25th and 75th percentiles. Returns the
    ascending centroids and, for each value, the index of its centroid.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if np.unique(x).size < k:
        raise ValueError(f"need at least {k} distinct values for {k}-means")
    qs = (np.arange(k) + 0.5) / k * 100.0
    centroids = np.percentile(x, qs)
    if np.unique(centroids).size < k:
        # heavy ties at the quantiles; fall back to spreading over the range
        centroids = np.linspace(x.min(), x.max(), k)

    for _ in range(max_iter):
        labels = _assign(x, centroids)
        updated = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if members.size:
                updated[j] = members.mean()
        shift = np.max(np.abs(updated - centroids))
        centroids = np.sort(updated)
        if shift < tol:
            break
    return centroids, _assign(x, centroids)


def _assign(x, centroids):
    # centroids are sorted, so midpoints split the line into cells
    bounds = (centroids[1:] + centroids[:-1]) / 2.0
    return np.searchsorted(bounds, x, side="right")


def eta_from_threshold(T: float, clamp: bool = True) -> float:
    """Exponent that sends ``T`` to 0.8: ``ln(0.2) / ln(1 - T)``."""
    if not 0.0 < T < 1.0:
        raise ValueError(f"T must lie strictly between 0 and 1, got {T}")
    eta = math.log(1.0 - TARGET_LEVEL) / math.log(1.0 - T)
    return min(max(eta, ETA_MIN), ETA_MAX) if clamp else eta


def estimate_eta(L) -> NismParams:
    """Cluster the illumination into dark/bright pixels and derive the NISM exponent."""
    x = np.asarray(L, dtype=np.float64).ravel()
    if x.size == 0 or x.max() - x.min() < 1e-3:
        log.warning("illumination map is nearly constant; using eta = 1")
        return NismParams(T=float(np.clip(x.mean() if x.size else 0.5, 1e-6, 1 - 1e-6)),
                          eta=1.0, degenerate=True)

    sample = x
    if x.size > MAX_KMEANS_SAMPLES:
        stride = math.ceil(x.size / MAX_KMEANS_SAMPLES)
        sample = x[::stride]
    if np.unique(sample).size < 2:
        sample = x
    centroids, _ = kmeans_1d(sample, 2)
    labels = _assign(x, centroids)
    T = float(x[labels == 1].min())

    if T >= 1.0 - 1e-6 or T <= 0.0:
        log.warning("bright-cluster threshold T=%.6g is degenerate; using eta = 1", T)
        return NismParams(T=float(np.clip(T, 1e-6, 1 - 1e-6)), eta=1.0, degenerate=True)
    raw = eta_from_threshold(T, clamp=False)
    eta = min(max(raw, ETA_MIN), ETA_MAX)
    return NismParams(T=T, eta=eta, clamped=eta != raw)


def apply_nism(L, eta: float):
    """Saturation curve ``1 - (1 - L) ** eta``."""
    return 1.0 - np.power(1.0 - np.asarray(L, dtype=np.float64), eta)


def apply_gamma(L, gamma: float):
    """Gamma curve ``L ** (1 / gamma)``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.power(np.asarray(L, dtype=np.float64), 1.0 / gamma)


def recompose(R, L_hat) -> np.ndarray:
    """Multiply every reflectance channel by the (1-channel) illumination and clamp."""
    R = np.asarray(R, dtype=np.float64)
    L_hat = np.asarray(L_hat, dtype=np.float64)
    if L_hat.ndim == 2:
        L_hat = L_hat[:, :, None]
    if R.ndim != 3 or L_hat.ndim != 3 or R.shape[:2] != L_hat.shape[:2] or L_hat.shape[2] != 1:
        raise ValueError(f"cannot recompose R {R.shape} with L {L_hat.shape}")
    return np.clip(R * L_hat, 0.0, 1.0)
