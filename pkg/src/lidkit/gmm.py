"""GMM-UBM training (binary splitting + EM), Baum-Welch statistics, MAP means."""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, solve_triangular
from scipy.special import logsumexp

from .errors import DimensionError, InsufficientDataError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
CHUNK = 32768


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    covariance_kind: str = "diagonal"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        K, F = self.means.shape
        if self.weights.shape != (K,):
            raise DimensionError("weights must have one entry per component")
        expected = (K, F) if self.covariance_kind == "diagonal" else (K, F, F)
        if self.covariance_kind not in ("diagonal", "full"):
            raise ValueError(f"unknown covariance kind {self.covariance_kind!r}")
        if self.covariances.shape != expected:
            raise DimensionError(f"covariances must have shape {expected}, got {self.covariances.shape}")

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def fingerprint(self):
        """Stable hash of all parameters; ties dependent models to this UBM."""
        h = hashlib.sha1(self.covariance_kind.encode())
        for a in (self.weights, self.means, self.covariances):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def precisions(self):
        """Per-component inverse covariances as full (K, F, F) matrices."""
        if self.covariance_kind == "diagonal":
            K, F = self.means.shape
            P = np.zeros((K, F, F))
            idx = np.arange(F)
            P[:, idx, idx] = 1.0 / self.covariances
            return P
        return np.linalg.inv(self.covariances)

    def component_loglik(self, x):
        """log w_k + log N(x_t; mu_k, Sigma_k), shape (frames, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionError(f"frames have {x.shape[1]} dims, model has {self.dim}")
        logw = np.log(self.weights)
        if self.covariance_kind == "diagonal":
            iv = 1.0 / self.covariances
            const = (logw - 0.5 * (self.dim * LOG_2PI + np.log(self.covariances).sum(axis=1)
                                   + (self.means ** 2 * iv).sum(axis=1)))
            return const + x @ (self.means * iv).T - 0.5 * (x ** 2) @ iv.T
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            L = np.linalg.cholesky(self.covariances[k])
            z = solve_triangular(L, (x - self.means[k]).T, lower=True)
            out[:, k] = (logw[k] - np.log(np.diag(L)).sum() - 0.5 * self.dim * LOG_2PI
                         - 0.5 * np.sum(z ** 2, axis=0))
        return out

    def posteriors(self, x):
        ll = self.component_loglik(x)
        return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))

    def log_likelihood(self, x):
        """Total log-likelihood of the frames."""
        total = 0.0
        for start in range(0, len(x), CHUNK):
            total += logsumexp(self.component_loglik(x[start:start + CHUNK]), axis=1).sum()
        return float(total)


@dataclass
class BwStats:
    """Zero- and first-order Baum-Welch statistics (first order uncentred)."""
    n: np.ndarray
    f: np.ndarray
    frames_total: int

    def __add__(self, other):
        return BwStats(self.n + other.n, self.f + other.f, self.frames_total + other.frames_total)

    def scaled(self, factor):
        return BwStats(self.n * factor, self.f * factor, self.frames_total)


def _estep(model, x, second_order):
    """Sufficient statistics and total log-likelihood of ``x`` under ``model``."""
    K, F = model.means.shape
    n = np.zeros(K)
    f = np.zeros((K, F))
    s = np.zeros((K, F) if second_order == "diagonal" else (K, F, F))
    total = 0.0
    for start in range(0, len(x), CHUNK):
        xc = x[start:start + CHUNK]
        ll = model.component_loglik(xc)
        norm = logsumexp(ll, axis=1, keepdims=True)
        total += norm.sum()
        g = np.exp(ll - norm)
        n += g.sum(axis=0)
        f += g.T @ xc
        if second_order == "diagonal":
            s += g.T @ (xc ** 2)
        else:
            for k in range(K):
                s[k] += (xc * g[:, k:k + 1]).T @ xc
    return n, f, s, float(total)


def _update_weights(n):
    w = np.maximum(n, 1e-10 * n.sum())
    empty = n < 1e-10 * n.sum()
    if np.any(empty):
        log.warning("%d GMM components received no data", int(empty.sum()))
    return w / w.sum(), empty


def _diag_em_step(model, x, floor):
    n, f, s, total = _estep(model, x, "diagonal")
    weights, empty = _update_weights(n)
    nn = np.maximum(n, 1e-300)[:, None]
    means = f / nn
    var = np.maximum(s / nn - means ** 2, floor)
    means[empty] = model.means[empty]
    var[empty] = model.covariances[empty]
    return GmmModel(weights, means, var, "diagonal"), total


def _split(model, rng):
    """Double every component along its largest-variance dimension (+/- 0.1 sigma)."""
    sd = np.sqrt(model.covariances)
    dim = np.argmax(model.covariances, axis=1)
    delta = np.zeros_like(model.means)
    rows = np.arange(model.n_components)
    delta[rows, dim] = 0.1 * sd[rows, dim]
    # tiny seeded jitter separates components that are exact copies
    delta += 1e-3 * sd * rng.standard_normal(delta.shape)
    means = np.concatenate([model.means + delta, model.means - delta])
    var = np.concatenate([model.covariances, model.covariances])
    w = np.concatenate([model.weights, model.weights]) / 2.0
    return GmmModel(w, means, var, "diagonal")


def _prune(model, K):
    keep = np.sort(np.argsort(-model.weights, kind="stable")[:K])
    w = model.weights[keep]
    return GmmModel(w / w.sum(), model.means[keep], model.covariances[keep], model.covariance_kind)


def train_diag_gmm(frames, K, iters=10, var_floor=1e-3, seed=0, split_iters=None, trace=None):
    """Diagonal-covariance GMM by binary splitting from the global Gaussian.

    Parameters
    ----------
    frames : ndarray (N, F)
        Pooled speech frames.
    K : int
        Target number of components.  Non powers of two are reached by
        splitting past ``K`` and discarding the lightest components.
    iters : int
        EM iterations at the final size.
    var_floor : float
        Variances are floored at ``var_floor`` times the global variance.
    split_iters : int, optional
        EM iterations at each intermediate size (default ``max(1, iters // 2)``).
    trace : list, optional
        Receives ``(n_components, mean_frame_loglik)`` for every EM iteration.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("frames must be a 2-D array")
    N, F = x.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if N < 10 * K:
        raise InsufficientDataError(f"{N} frames is fewer than 10 per component for K={K}")
    rng = np.random.default_rng(seed)
    floor = var_floor * x.var(axis=0)
    model = GmmModel(np.ones(1), x.mean(axis=0, keepdims=True),
                     np.maximum(x.var(axis=0, keepdims=True), floor), "diagonal")
    split_iters = max(1, iters // 2) if split_iters is None else split_iters

    def run(model, n_iter):
        for _ in range(n_iter):
            model, total = _diag_em_step(model, x, floor)
            if trace is not None:
                trace.append((model.n_components, total / N))
        return model

    while model.n_components < K:
        model = run(_split(model, rng), split_iters)
    if model.n_components > K:
        model = _prune(model, K)
    model = run(model, iters)
    if trace is not None:
        trace.append((model.n_components, model.log_likelihood(x) / N))
    return model


def _regularized_cholesky_ok(cov, ridge):
    try:
        cho_factor(cov, lower=True)
        return cov
    except np.linalg.LinAlgError:
        pass
    for scale in (1.0, 10.0, 100.0, 1e3, 1e4):
        fixed = cov + scale * np.diag(ridge)
        try:
            cho_factor(fixed, lower=True)
            return fixed
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("covariance could not be regularised")


def refine_full_gmm(diag, frames, iters=5, var_floor=1e-3, trace=None):
    """Continue EM with full covariances, starting from a diagonal model."""
    if diag.covariance_kind != "diagonal":
        raise ValueError("refine_full_gmm expects a diagonal model")
    x = np.asarray(frames, dtype=np.float64)
    N, F = x.shape
    if N < 10 * diag.n_components:
        raise InsufficientDataError(f"{N} frames is fewer than 10 per component")
    ridge = var_floor * x.var(axis=0)
    covs = np.zeros((diag.n_components, F, F))
    idx = np.arange(F)
    covs[:, idx, idx] = diag.covariances
    model = GmmModel(diag.weights.copy(), diag.means.copy(), covs, "full")
    for _ in range(iters):
        n, f, s, total = _estep(model, x, "full")
        if trace is not None:
            trace.append((model.n_components, total / N))
        weights, empty = _update_weights(n)
        nn = np.maximum(n, 1e-300)
        means = f / nn[:, None]
        new_covs = s / nn[:, None, None] - np.einsum("ki,kj->kij", means, means)
        new_covs = 0.5 * (new_covs + new_covs.transpose(0, 2, 1))
        for k in range(model.n_components):
            if empty[k]:
                means[k], new_covs[k] = model.means[k], model.covariances[k]
            else:
                new_covs[k] = _regularized_cholesky_ok(new_covs[k], ridge)
        model = GmmModel(weights, means, new_covs, "full")
    if trace is not None:
        trace.append((model.n_components, model.log_likelihood(x) / N))
    return model


def accumulate_stats(ubm, feat):
    """Baum-Welch statistics of the speech frames of ``feat`` under ``ubm``.

    ``feat`` is a ``FeatureMatrix`` or a plain (frames, dims) array.
    """
    x = feat.speech() if hasattr(feat, "speech") else np.atleast_2d(np.asarray(feat, dtype=np.float64))
    if x.shape[1] != ubm.dim:
        raise DimensionError(f"features have {x.shape[1]} dims, UBM has {ubm.dim}")
    n = np.zeros(ubm.n_components)
    f = np.zeros((ubm.n_components, ubm.dim))
    for start in range(0, len(x), CHUNK):
        xc = x[start:start + CHUNK]
        g = ubm.posteriors(xc)
        n += g.sum(axis=0)
        f += g.T @ xc
    return BwStats(n, f, int(x.shape[0]))


def _inv_sqrt(cov):
    vals, vecs = np.linalg.eigh(cov)
    return (vecs / np.sqrt(vals)) @ vecs.T


def map_supervector(ubm, feat, relevance=16.0, kl_normalize=False, stats=None):
    """MAP-adapted means stacked component-major into a K*F supervector.

    With ``kl_normalize`` each block is scaled by sqrt(w_k) Sigma_k^{-1/2}.
    """
    if relevance < 0:
        raise ValueError("relevance must be >= 0")
    st = accumulate_stats(ubm, feat) if stats is None else stats
    n = st.n[:, None]
    safe = np.where(n > 0, n, 1.0)
    xbar = np.where(n > 0, st.f / safe, ubm.means)
    denom = n + relevance
    adapted = np.where(denom > 0, (n * xbar + relevance * ubm.means) / np.where(denom > 0, denom, 1.0),
                       ubm.means)
    if kl_normalize:
        if ubm.covariance_kind == "diagonal":
            adapted = adapted * np.sqrt(ubm.weights)[:, None] / np.sqrt(ubm.covariances)
        else:
            adapted = np.stack([np.sqrt(ubm.weights[k]) * _inv_sqrt(ubm.covariances[k]) @ adapted[k]
                                for k in range(ubm.n_components)])
    return adapted.reshape(-1)
