"""One-vs-one linear SVMs trained with Pegasos primal subgradient steps."""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from ..errors import DataError


@dataclass
class SvmSet:
    language_order: list
    classifiers: dict = field(default_factory=dict)
    regularization: float = 1.0
    mode: str = "one_vs_one"


def hinge_objective(w, b, x, y, lam):
    margins = y * (x @ w + b)
    return 0.5 * lam * (w @ w + b * b) + np.mean(np.maximum(0.0, 1.0 - margins))


def pegasos(x, y, C=1.0, epochs=200, seed=0, history=None):
    """Linear soft-margin SVM on labels +/-1.

    Minimises ``lam/2 (|w|^2 + b^2) + mean(hinge)`` with ``lam = 1/(C n)``
    (the bias is an extra, regularised, constant feature).  One step per
    sample with rate ``1/(lam t)``, a seeded permutation each epoch and the
    projection onto the ball of radius ``1/sqrt(lam)``.  Returns the
    epoch-end iterate with the lowest objective.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    lam = 1.0 / (C * n)
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(seed)
    v = np.zeros(d + 1)
    best, best_obj = v.copy(), hinge_objective(v[:d], v[d], x, y, lam)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            active = y[i] * (xa[i] @ v) < 1.0
            v *= 1.0 - eta * lam
            if active:
                v += eta * y[i] * xa[i]
            nrm = np.linalg.norm(v)
            if nrm > radius:
                v *= radius / nrm
        obj = hinge_objective(v[:d], v[d], x, y, lam)
        if history is not None:
            history.append(obj)
        if obj < best_obj:
            best, best_obj = v.copy(), obj
    return best[:d], float(best[d])


def svm_train(features, labels, C=1.0, epochs=200, seed=0):
    """One classifier per unordered language pair; positive side = first language."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    order = sorted(set(labels.tolist()))
    if len(order) < 2:
        raise DataError("SVM needs at least two languages")
    model = SvmSet(order, {}, float(C))
    for i, j in combinations(range(len(order)), 2):
        pos, neg = labels == order[i], labels == order[j]
        if not pos.any() or not neg.any():
            raise DataError(f"empty class in pair ({order[i]}, {order[j]})")
        xp = np.vstack([x[pos], x[neg]])
        yp = np.concatenate([np.ones(pos.sum()), -np.ones(neg.sum())])
        model.classifiers[(order[i], order[j])] = pegasos(xp, yp, C, epochs, seed + 7919 * i + j)
    return model


def svm_score(model, x, voting=False):
    """Per-language pairwise scores.

    Default: the mean signed margin in favour of each language over its pairs.
    ``voting``: number of pairs won, with a small order-based tie-break.
    """
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    L = len(model.language_order)
    idx = {lang: k for k, lang in enumerate(model.language_order)}
    out = np.zeros((x.shape[0], L))
    for (a, b), (w, bias) in model.classifiers.items():
        m = x @ w + bias
        if voting:
            out[:, idx[a]] += m > 0
            out[:, idx[b]] += m <= 0
        else:
            out[:, idx[a]] += m
            out[:, idx[b]] -= m
    if voting:
        out -= 1e-6 * np.arange(L)
    elif L > 1:
        out /= L - 1
    return out[0] if single else out
