"""Multiclass logistic regression calibration (scalar scale, per-language offsets).

The optimiser here is shared with score fusion: logits are
``sum_s weight_s * scores_s + beta`` and the objective is the flat-prior
multiclass cross-entropy (every language weighted equally regardless of its
trial count), in nats.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from ..errors import DataError, NumericError
from ..scores import ScoreMatrix, label_indices

log = logging.getLogger(__name__)

GRAD_TOL = 1e-7
MAX_ITER = 500


@dataclass
class MclrModel:
    alpha: float
    beta: np.ndarray
    language_order: list

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def _class_weights(y, n_classes):
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    if present.sum() < 2:
        raise DataError("calibration needs trials from at least two languages")
    per_class = np.where(present, 1.0 / (present.sum() * np.maximum(counts, 1)), 0.0)
    return per_class[y]


def affine_xent(params, X, y, l2=0.0, hessian=False):
    """Flat-prior cross-entropy of ``softmax(sum_s params[s] X[s] + params[S:])``.

    Parameters
    ----------
    params : ndarray (S + L,)
        Subsystem weights followed by per-language offsets.
    X : ndarray (S, N, L)
    y : ndarray (N,) of int

    Returns ``(value, gradient)`` or ``(value, gradient, hessian)``.
    """
    S, N, L = X.shape
    w, beta = params[:S], params[S:]
    c = _class_weights(y, L)
    z = np.tensordot(w, X, axes=1) + beta
    logp = log_softmax(z, axis=1)
    value = -np.sum(c * logp[np.arange(N), y]) + 0.5 * l2 * params @ params
    p = np.exp(logp)
    G = p.copy()
    G[np.arange(N), y] -= 1.0
    G *= c[:, None]
    grad = np.concatenate([np.einsum("snl,nl->s", X, G), G.sum(axis=0)]) + l2 * params
    if not hessian:
        return value, grad
    # per-trial softmax curvature c (diag p - p p')
    M = c[:, None, None] * (np.einsum("nl,lm->nlm", p, np.eye(L)) - np.einsum("nl,nm->nlm", p, p))
    MX = np.einsum("nlm,smn->snl", M, X.transpose(0, 2, 1))
    H = np.empty((S + L, S + L))
    H[:S, :S] = np.einsum("snl,tnl->st", MX, X)
    H[:S, S:] = MX.sum(axis=1)
    H[S:, :S] = H[:S, S:].T
    H[S:, S:] = M.sum(axis=0)
    H += l2 * np.eye(S + L)
    return value, grad, H


def fit_affine_xent(X, y, l2=0.0, positive=False, max_iter=MAX_ITER, tol=GRAD_TOL):
    """Minimise ``affine_xent`` from weights 1, offsets 0.

    Descent with Armijo backtracking; the search direction is the
    (pseudo-inverse) Newton step when it is a descent direction, else the
    negative gradient.  With ``positive`` the weights are kept > 0.
    Returns ``(params, value, n_iter)``.
    """
    S, N, L = X.shape
    params = np.concatenate([np.ones(S), np.zeros(L)])
    value, grad, H = affine_xent(params, X, y, l2, hessian=True)
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            it -= 1
            break
        direction = -np.linalg.lstsq(H, grad, rcond=1e-12)[0]
        slope = grad @ direction
        if not np.all(np.isfinite(direction)) or slope >= -1e-16 * (grad @ grad):
            direction = -grad
            slope = -(grad @ grad)
        step = 1.0
        while True:
            trial = params + step * direction
            ok = not positive or np.all(trial[:S] > 0)
            if ok:
                t_value, t_grad, t_H = affine_xent(trial, X, y, l2, hessian=True)
                if t_value <= value + 1e-4 * step * slope:
                    break
            step *= 0.5
            if step < 1e-20:
                log.debug("line search stalled at gradient norm %.3g", np.max(np.abs(grad)))
                return _centre(params, S), value, it
        params, value, grad, H = trial, t_value, t_grad, t_H
    if not np.isfinite(value):
        raise NumericError("logistic regression diverged")
    return _centre(params, S), value, it


def _centre(params, S):
    # softmax is invariant to a common offset; report zero-mean offsets
    out = params.copy()
    out[S:] -= out[S:].mean()
    return out


def mclr_objective(alpha, beta, scores, labels, l2=0.0):
    """Cross-entropy of the calibrated scores (for probing and tests)."""
    X = scores.scores[None]
    y = label_indices(labels, scores.language_order)
    return affine_xent(np.concatenate([[alpha], beta]), X, y, l2)[0]


def mclr_train(scores, labels, l2=0.0):
    """Fit ``softmax(alpha * s + beta)`` to the labels by flat-prior cross-entropy."""
    y = label_indices(labels, scores.language_order)
    if len(np.unique(y)) < 2:
        raise DataError("MCLR needs at least two languages among the labels")
    params, value, n_iter = fit_affine_xent(scores.scores[None], y, l2, positive=True)
    log.info("MCLR converged in %d iterations, cross-entropy %.6f nats", n_iter, value)
    return MclrModel(float(params[0]), params[1:], list(scores.language_order))


def detection_llr(s):
    """``s_l - log(mean_{k != l} exp(s_k))`` row-wise."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    L = s.shape[1]
    if L < 2:
        return s.copy()
    out = np.empty_like(s)
    for l in range(L):
        others = np.delete(s, l, axis=1)
        out[:, l] = s[:, l] - (logsumexp(others, axis=1) - np.log(L - 1))
    return out


def mclr_apply(model, scores):
    """Calibrated scores converted to detection log-likelihood ratios."""
    if scores.language_order != model.language_order:
        raise DataError("score matrix language order differs from the calibration model")
    calibrated = model.alpha * scores.scores + model.beta
    return ScoreMatrix(scores.utt_ids, scores.language_order, detection_llr(calibrated), "llr")
