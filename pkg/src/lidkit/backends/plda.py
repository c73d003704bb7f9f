"""Simplified Gaussian PLDA: ``x = mu + F h + e``, h ~ N(0, I_r), e ~ N(0, Sigma_w)."""

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, DimensionError, LidWarning

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PldaModel:
    mu: np.ndarray
    F: np.ndarray
    sigma_w: np.ndarray

    @property
    def rank(self):
        return self.F.shape[1]


@dataclass
class PldaEnrollment:
    """Per-language sufficient statistics of the enrollment vectors."""
    language_order: list
    counts: np.ndarray
    sums: np.ndarray


def _class_stats(x, labels):
    order = sorted(set(labels.tolist()))
    counts = np.array([np.sum(labels == c) for c in order], dtype=np.float64)
    sums = np.stack([x[labels == c].sum(axis=0) for c in order])
    return order, counts, sums


def _log_gauss_zero(x, cov):
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, x.T)
    return -0.5 * np.sum(z ** 2, axis=0) - np.log(np.diag(L)).sum() - 0.5 * x.shape[1] * LOG_2PI


def plda_log_likelihood(model, ivectors, labels):
    """Exact marginal log-likelihood of the data with class latents integrated out."""
    x = np.asarray(ivectors, dtype=np.float64) - model.mu
    labels = np.asarray(labels)
    _, counts, sums = _class_stats(x, labels)
    total = _log_gauss_zero(x, model.sigma_w).sum()
    SiF = np.linalg.solve(model.sigma_w, model.F)
    FtSiF = model.F.T @ SiF
    r = model.rank
    for n, s in zip(counts, sums):
        P = np.eye(r) + n * FtSiF
        b = SiF.T @ s
        _, logdet = np.linalg.slogdet(P)
        total += 0.5 * b @ np.linalg.solve(P, b) - 0.5 * logdet
    return float(total)


def plda_train(ivectors, labels, rank, iters=10, trace=None):
    """EM for the simplified PLDA model.

    The mean is the global mean.  ``F`` is initialised from the leading
    eigenvectors of the between-class scatter, ``Sigma_w`` from the
    within-class scatter.  ``trace`` receives the marginal log-likelihood
    before each iteration and after the last.
    """
    x = np.asarray(ivectors, dtype=np.float64)
    labels = np.asarray(labels)
    N, R = x.shape
    if rank > R:
        raise DimensionError(f"PLDA rank {rank} exceeds dimension {R}")
    order, counts, _ = _class_stats(x, labels)
    if len(order) < 2:
        raise DataError("PLDA needs at least two classes")
    if rank > len(order) - 1:
        warnings.warn(f"only {len(order)} classes; PLDA rank clipped from {rank} to {len(order) - 1}",
                      LidWarning, stacklevel=2)
        rank = len(order) - 1
    mu = x.mean(axis=0)
    xc = x - mu
    _, counts, sums = _class_stats(xc, labels)
    class_means = sums / counts[:, None]
    Sb = (class_means * counts[:, None]).T @ class_means / N
    idx = np.searchsorted(order, labels)
    resid = xc - class_means[idx]
    Sw = resid.T @ resid / N + 1e-6 * np.trace(Sb + resid.T @ resid / N) / R * np.eye(R)
    vals, vecs = np.linalg.eigh(Sb)
    top = np.argsort(vals)[::-1][:rank]
    F = vecs[:, top] * np.sqrt(np.maximum(vals[top], 1e-10))
    model = PldaModel(mu, F, Sw)
    scatter = xc.T @ xc
    for _ in range(iters):
        if trace is not None:
            trace.append(plda_log_likelihood(model, x, labels))
        SiF = np.linalg.solve(model.sigma_w, model.F)
        FtSiF = model.F.T @ SiF
        Ehh = np.zeros((rank, rank))
        cross = np.zeros((R, rank))
        for n, s in zip(counts, sums):
            P_inv = np.linalg.inv(np.eye(rank) + n * FtSiF)
            h = P_inv @ (SiF.T @ s)
            Ehh += n * (P_inv + np.outer(h, h))
            cross += np.outer(s, h)
        F = np.linalg.solve(Ehh, cross.T).T
        Sw = (scatter - F @ cross.T) / N
        model = PldaModel(mu, F, 0.5 * (Sw + Sw.T))
    if trace is not None:
        trace.append(plda_log_likelihood(model, x, labels))
    return model


def plda_enroll(ivectors, labels):
    x = np.asarray(ivectors, dtype=np.float64)
    order, counts, sums = _class_stats(x, np.asarray(labels))
    return PldaEnrollment(order, counts, sums)


def plda_enroll_map(enroll):
    """Build an enrollment from ``{language: array of vectors}``."""
    order = sorted(enroll)
    vecs = [np.atleast_2d(np.asarray(enroll[k], dtype=np.float64)) for k in order]
    if any(len(v) == 0 for v in vecs):
        raise DataError("every language needs at least one enrollment vector")
    return PldaEnrollment(order, np.array([len(v) for v in vecs], dtype=np.float64),
                          np.stack([v.sum(axis=0) for v in vecs]))


def plda_score(model, enroll, test):
    """``log p(test | enrollment of l) - log p(test)`` per language.

    ``enroll`` is a ``PldaEnrollment`` or a mapping language -> vectors;
    ``test`` one vector or a batch.
    """
    if not isinstance(enroll, PldaEnrollment):
        enroll = plda_enroll_map(enroll)
    x = np.atleast_2d(np.asarray(test, dtype=np.float64))
    single = np.ndim(test) == 1
    if x.shape[1] != model.mu.shape[0]:
        raise DimensionError(f"test vectors have {x.shape[1]} dims, model has {model.mu.shape[0]}")
    xc = x - model.mu
    F, Sw = model.F, model.sigma_w
    r = model.rank
    SiF = np.linalg.solve(Sw, F)
    FtSiF = F.T @ SiF
    null = _log_gauss_zero(xc, Sw + F @ F.T)
    out = np.empty((x.shape[0], len(enroll.language_order)))
    for i, (n, s) in enumerate(zip(enroll.counts, enroll.sums - enroll.counts[:, None] * model.mu)):
        P_inv = np.linalg.inv(np.eye(r) + n * FtSiF)
        h = P_inv @ (SiF.T @ s)
        cov = Sw + F @ P_inv @ F.T
        out[:, i] = _log_gauss_zero(xc - F @ h, 0.5 * (cov + cov.T)) - null
    return out[0] if single else out
