"""Gaussian back-end with covariance smoothing towards a shared matrix."""

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, LidWarning

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianBackend:
    language_order: list
    means: np.ndarray
    sigma_global: np.ndarray
    sigma_smoothed: np.ndarray
    gamma: float = 0.1


def _ensure_spd(cov, floor=1e-10):
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    scale = max(vals.max(), 1e-300)
    if vals.min() >= floor * scale:
        return cov
    return (vecs * np.maximum(vals, floor * scale)) @ vecs.T


def gb_train(ivectors, labels, gamma=0.1):
    """Per-language means; covariances ``(1-gamma) * pooled + gamma * own``.

    All covariances are maximum-likelihood estimates.  ``gamma = 0`` is the
    linear (shared-covariance) back-end.
    """
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    x = np.asarray(ivectors, dtype=np.float64)
    labels = np.asarray(labels)
    order = sorted(set(labels.tolist()))
    if len(order) < 2:
        raise DataError("Gaussian back-end needs at least two languages")
    R = x.shape[1]
    means = np.zeros((len(order), R))
    own = np.zeros((len(order), R, R))
    scatter = np.zeros((R, R))
    enough = np.ones(len(order), dtype=bool)
    for i, lang in enumerate(order):
        xl = x[labels == lang]
        means[i] = xl.mean(axis=0)
        d = xl - means[i]
        scatter += d.T @ d
        if len(xl) < 2:
            enough[i] = False
            continue
        own[i] = d.T @ d / len(xl)
    sigma_global = _ensure_spd(scatter / len(x))
    smoothed = np.empty_like(own)
    for i, lang in enumerate(order):
        if not enough[i]:
            warnings.warn(f"language {lang!r} has fewer than 2 vectors; using the pooled covariance",
                          LidWarning, stacklevel=2)
            smoothed[i] = sigma_global
        elif gamma == 0:
            smoothed[i] = sigma_global
        else:
            smoothed[i] = _ensure_spd((1 - gamma) * sigma_global + gamma * own[i])
    return GaussianBackend(order, means, sigma_global, smoothed, float(gamma))


def gb_score(model, w):
    """Exact Gaussian log-densities of ``w`` (one vector or a batch) per language."""
    x = np.asarray(w, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    R = x.shape[1]
    out = np.empty((x.shape[0], len(model.language_order)))
    for i in range(len(model.language_order)):
        L = np.linalg.cholesky(model.sigma_smoothed[i])
        z = np.linalg.solve(L, (x - model.means[i]).T)
        out[:, i] = -0.5 * (np.sum(z ** 2, axis=0) + R * LOG_2PI) - np.log(np.diag(L)).sum()
    return out[0] if single else out
