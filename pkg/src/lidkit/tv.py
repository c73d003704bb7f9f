"""Total-variability subspace training, i-vector extraction and normalisation.

The supervector model is ``m = m_ubm + bias + T w`` with ``w ~ N(0, I)`` and
residual covariances taken from the UBM.  ``bias`` starts at zero and absorbs
the prior mean during the minimum-divergence step.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import hash_bucket
from .errors import DimensionError, InsufficientDataError, LidWarning
from .gmm import GmmModel

log = logging.getLogger(__name__)


@dataclass
class TvModel:
    T: np.ndarray
    ubm: GmmModel
    bias: np.ndarray = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        K, F = self.ubm.means.shape
        if self.T.ndim != 2 or self.T.shape[0] != K * F or self.T.shape[1] < 1:
            raise DimensionError(f"T must be ({K * F}, R), got {self.T.shape}")
        if self.bias is None:
            self.bias = np.zeros(K * F)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not np.all(np.isfinite(self.T)):
            raise ValueError("T has non-finite entries")

    @property
    def rank(self):
        return self.T.shape[1]

    @property
    def ubm_ref(self):
        return self.ubm.fingerprint()


class _Projections:
    """T_k' P_k and T_k' P_k T_k per component, P_k the UBM precision."""

    def __init__(self, T, ubm):
        K, F = ubm.means.shape
        R = T.shape[1]
        Tk = T.reshape(K, F, R)
        P = ubm.precisions()
        self.TtP = np.einsum("kfr,kfg->krg", Tk, P)
        self.TtPT = np.einsum("krf,kfs->krs", self.TtP, Tk)
        self.K, self.F, self.R = K, F, R


def _stack(stats_list, ubm, bias):
    K, F = ubm.means.shape
    N = np.stack([s.n for s in stats_list])
    f = np.stack([s.f for s in stats_list])
    if N.shape[1] != K or f.shape[1:] != (K, F):
        raise DimensionError(f"statistics do not match a UBM with K={K}, F={F}")
    centre = ubm.means + bias.reshape(K, F)
    return N, f - N[:, :, None] * centre[None]


def _posterior_system(proj, N, Fc, prior_mean=None, prior_cov=None):
    """Precision L_u and linear term b_u of each utterance's posterior over w."""
    U = N.shape[0]
    R = proj.R
    L = (N @ proj.TtPT.reshape(proj.K, R * R)).reshape(U, R, R)
    b = Fc.reshape(U, -1) @ proj.TtP.transpose(0, 2, 1).reshape(-1, R)
    if prior_cov is None:
        L += np.eye(R)
    else:
        G_inv = np.linalg.inv(prior_cov)
        L += G_inv
        b += G_inv @ prior_mean
    return L, b


def _posteriors(L, b):
    chol = np.linalg.cholesky(L)
    cov = np.linalg.inv(L)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    w = np.einsum("urs,us->ur", cov, b)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return w, cov, logdet


# utterances per batch, so that U x R x R posterior arrays stay around 32 MB
BATCH_ELEMENTS = 4_000_000


def _batches(n_items, R):
    size = max(1, BATCH_ELEMENTS // (R * R))
    for start in range(0, n_items, size):
        yield slice(start, min(n_items, start + size))


def tv_log_likelihood(stats_list, ubm, T, bias=None, prior_mean=None, prior_cov=None):
    """Marginal log-likelihood of the statistics under the factor model.

    Terms that do not depend on ``T``, ``bias`` or the prior (UBM normalisers
    and second-order statistics) are dropped.  The prior defaults to N(0, I).
    """
    stats_list = list(stats_list)
    K, F = ubm.means.shape
    bias = np.zeros(K * F) if bias is None else bias
    proj = _Projections(T, ubm)
    P = ubm.precisions()
    total = 0.0
    for sl in _batches(len(stats_list), proj.R):
        N, Fc = _stack(stats_list[sl], ubm, bias)
        L, b = _posterior_system(proj, N, Fc, prior_mean, prior_cov)
        w, _, logdet = _posteriors(L, b)
        total += 0.5 * np.einsum("ur,ur->", b, w) - 0.5 * logdet.sum()
        # bias-dependent part of the second-order term: -1/2 sum_k f~' P f~ / n_k
        total -= 0.5 * np.einsum("ukf,kfg,ukg->", Fc, P, Fc / np.maximum(N, 1e-300)[:, :, None])
    if prior_cov is not None:
        _, g_logdet = np.linalg.slogdet(prior_cov)
        total -= 0.5 * (prior_mean @ np.linalg.solve(prior_cov, prior_mean) + g_logdet) * len(stats_list)
    return float(total)


def _min_div_params(T, bias, mu, second_moment):
    """New (T, bias, C) given the aggregate posterior mean and E[ww']."""
    G = second_moment - np.outer(mu, mu)
    C = np.linalg.cholesky(0.5 * (G + G.T))
    return T @ C, bias + T @ mu, C


def minimum_divergence(T, bias, w_means, w_covs):
    """Re-parameterise so the aggregate posterior of w becomes N(0, I).

    Returns ``(T', bias', means', covs')`` where the last two are the input
    posteriors expressed in the new coordinates.
    """
    U = len(w_means)
    mu = w_means.mean(axis=0)
    new_T, new_bias, C = _min_div_params(T, bias, mu, (w_covs.sum(axis=0) + w_means.T @ w_means) / U)
    C_inv = np.linalg.inv(C)
    new_means = (w_means - mu) @ C_inv.T
    new_covs = np.einsum("rs,ust,qt->urq", C_inv, w_covs, C_inv)
    return new_T, new_bias, new_means, new_covs


def train_tv(stats_list, ubm, R, iters=10, seed=0, min_div=True, trace=None):
    """EM training of the total-variability matrix.

    Each iteration: posterior of w per utterance, per-component least-squares
    update of T, then (``min_div``) the minimum-divergence re-parameterisation.
    ``trace`` receives the log-likelihood before every update plus the final one.
    """
    stats_list = list(stats_list)
    U = len(stats_list)
    if U < R:
        raise InsufficientDataError(f"{U} utterances is fewer than rank {R}")
    K, F = ubm.means.shape
    rng = np.random.default_rng(seed)
    T = 0.001 * rng.standard_normal((K * F, R))
    bias = np.zeros(K * F)
    for it in range(iters):
        if trace is not None:
            trace.append(tv_log_likelihood(stats_list, ubm, T, bias))
        proj = _Projections(T, ubm)
        A = np.zeros((K, R, R))
        C = np.zeros((K, F, R))
        w_sum, ww_sum = np.zeros(R), np.zeros((R, R))
        for sl in _batches(U, R):
            N, Fc = _stack(stats_list[sl], ubm, bias)
            w, cov, _ = _posteriors(*_posterior_system(proj, N, Fc))
            Eww = cov + np.einsum("ur,us->urs", w, w)
            A += np.einsum("uk,urs->krs", N, Eww)
            C += np.einsum("ukf,ur->kfr", Fc, w)
            w_sum += w.sum(axis=0)
            ww_sum += Eww.sum(axis=0)
        Tk = np.empty((K, F, R))
        for k in range(K):
            try:
                np.linalg.cholesky(A[k])
                Tk[k] = np.linalg.solve(A[k], C[k].T).T
            except np.linalg.LinAlgError:
                warnings.warn(f"singular TV normal equations for component {k}; adding ridge 1e-6",
                              LidWarning, stacklevel=2)
                Tk[k] = np.linalg.solve(A[k] + 1e-6 * np.eye(R), C[k].T).T
        T = Tk.reshape(K * F, R)
        if min_div:
            T, bias, _ = _min_div_params(T, bias, w_sum / U, ww_sum / U)
        log.debug("TV iteration %d done", it + 1)
    if trace is not None:
        trace.append(tv_log_likelihood(stats_list, ubm, T, bias))
    return TvModel(T, ubm, bias)


def extract_ivectors(tv, stats_list):
    """Posterior means of w for many utterances, shape (U, R)."""
    stats_list = list(stats_list)
    proj = _Projections(tv.T, tv.ubm)
    out = np.zeros((len(stats_list), tv.rank))
    for sl in _batches(len(stats_list), tv.rank):
        N, Fc = _stack(stats_list[sl], tv.ubm, tv.bias)
        L, b = _posterior_system(proj, N, Fc)
        chol = np.linalg.cholesky(L)
        y = np.linalg.solve(chol, b[:, :, None])
        out[sl] = np.linalg.solve(chol.transpose(0, 2, 1), y)[:, :, 0]
    return out


def extract_ivector(tv, stats):
    """w = (I + T' S^-1 N T)^-1 T' S^-1 f~ for a single utterance."""
    return extract_ivectors(tv, [stats])[0]


# -- normalisation -------------------------------------------------------------

@dataclass
class Normalizer:
    """Sequence of affine stages ``x -> A (x - m)``.

    ``whiten`` has one stage and length-normalises only if ``length_norm``.
    ``efr`` length-normalises after every stage.
    """
    kind: str
    stages: list = field(default_factory=list)
    length_norm: bool = False

    @property
    def iterations(self):
        return len(self.stages)

    @property
    def mean(self):
        return self.stages[0][0]

    @property
    def transform(self):
        return self.stages[0][1]


def _unit(x):
    x = np.atleast_2d(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        warnings.warn("zero vector cannot be length-normalised; left at zero", LidWarning, stacklevel=3)
    return x / np.where(norms == 0, 1.0, norms)


def _whitening_stage(x):
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, bias=True)
    vals, vecs = np.linalg.eigh(np.atleast_2d(cov))
    if np.any(vals < 1e-10):
        warnings.warn("rank-deficient covariance; eigenvalues floored at 1e-10", LidWarning, stacklevel=3)
        vals = np.maximum(vals, 1e-10)
    return mean, (vecs / np.sqrt(vals)).T


def fit_normalizer(ivectors, kind="whiten", iterations=1, length_norm=None):
    """Estimate whitening (``kind="whiten"``) or EFR normalisation stages.

    Covariances are maximum-likelihood (divide by count).
    """
    x = np.asarray(ivectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("need at least 2 vectors to fit a normaliser")
    if x.shape[0] <= x.shape[1]:
        log.warning("fitting a %d-dim normaliser on only %d vectors", x.shape[1], x.shape[0])
    if kind == "whiten":
        return Normalizer("whiten", [_whitening_stage(x)], bool(length_norm))
    if kind != "efr":
        raise ValueError(f"unknown normaliser kind {kind!r}")
    stages = []
    for _ in range(iterations):
        mean, A = _whitening_stage(x)
        stages.append((mean, A))
        x = _unit((x - mean) @ A.T)
    return Normalizer("efr", stages, True)


def apply_normalizer(norm, w):
    """Apply to one vector (1-D) or a batch (2-D)."""
    x = np.asarray(w, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != norm.mean.shape[0]:
        raise DimensionError(f"normaliser expects {norm.mean.shape[0]} dims, got {x.shape[1]}")
    for mean, A in norm.stages:
        x = (x - mean) @ A.T
        if norm.kind == "efr":
            x = _unit(x)
    if norm.kind == "whiten" and norm.length_norm:
        x = _unit(x)
    return x[0] if single else x


def identity_normalizer(dim):
    return Normalizer("whiten", [(np.zeros(dim), np.eye(dim))], False)


# -- recipes ---------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractorPreset:
    """UBM/TV/normaliser recipe with full-scale and desk-scale sizes."""
    name: str
    covariance_kind: str
    full_components: int
    full_rank: int
    normalizer: str
    length_norm: bool
    cmvn: str = "per_utterance"
    desk_components: int = 64
    desk_rank: int = 50
    efr_iterations: int = 1

    def sizes(self, scale="desk"):
        if scale == "full":
            return self.full_components, self.full_rank
        return self.desk_components, self.desk_rank


PRESETS = {
    "i2r": ExtractorPreset("i2r", "full", 1024, 600, "whiten", True),
    "lium": ExtractorPreset("lium", "diagonal", 512, 500, "efr", True),
    "ntu": ExtractorPreset("ntu", "full", 2048, 400, "whiten", False, cmvn="sliding"),
    "uef": ExtractorPreset("uef", "diagonal", 512, 400, "whiten", True),
}


def training_subset(utt_ids):
    """Boolean mask selecting the deterministic two-thirds training part."""
    return np.array([hash_bucket(u, 3) != 2 for u in utt_ids], dtype=bool)
