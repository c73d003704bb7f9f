"""Score fusion, per-cluster LLR conversion and detection metrics.

Fusion fits ``softmax(sum_s weight_s * scores_s + beta)`` with the same
flat-prior cross-entropy optimiser used for single-system calibration.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .backends.mclr import affine_xent, fit_affine_xent
from .corpus import hash_bucket
from .errors import DataError, LidWarning
from .scores import ScoreMatrix, check_aligned, label_indices

log = logging.getLogger(__name__)


@dataclass
class FusionModel:
    weights: np.ndarray
    beta: np.ndarray
    language_order: list
    fold_xent: list = field(default_factory=list)   # held-out cross-entropy per fold, nats

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if self.weights.size < 1:
            raise ValueError("fusion needs at least one subsystem weight")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.beta))):
            raise ValueError("fusion parameters must be finite")

    @property
    def mean_fold_xent(self):
        return float(np.mean(self.fold_xent)) if self.fold_xent else float("nan")


def _stack(subsystem_scores):
    check_aligned(subsystem_scores)
    return np.stack([m.scores for m in subsystem_scores])


def fold_assignment(utt_ids, folds):
    return np.array([hash_bucket(u, folds) for u in utt_ids])


def fusion_xent(model, subsystem_scores, labels):
    """Flat-prior cross-entropy (nats) of the fused scores."""
    X = _stack(subsystem_scores)
    y = label_indices(labels, subsystem_scores[0].language_order)
    return affine_xent(np.concatenate([model.weights, model.beta]), X, y)[0]


def fusion_train(subsystem_scores, labels, folds=2, l2=0.0):
    """Fit fusion weights and offsets; report held-out cross-entropy per fold.

    Trials are assigned to folds by a CRC32 hash of the utterance id.  For
    each fold a model is fitted on the remaining folds and scored on it;
    the returned model is refitted on all trials.
    """
    if folds < 2:
        raise ValueError("fusion needs at least two folds")
    X = _stack(subsystem_scores)
    order = subsystem_scores[0].language_order
    y = label_indices(labels, order)
    if len(y) != X.shape[1]:
        raise DataError("label count differs from trial count")
    assign = fold_assignment(subsystem_scores[0].utt_ids, folds)
    held_out = []
    for f in range(folds):
        test = assign == f
        if not test.any() or test.all():
            warnings.warn(f"fold {f} is empty or covers every trial; skipped", LidWarning, stacklevel=2)
            continue
        params, _, _ = fit_affine_xent(X[:, ~test], y[~test], l2)
        held_out.append(float(affine_xent(params, X[:, test], y[test])[0]))
    params, value, n_iter = fit_affine_xent(X, y, l2)
    S = X.shape[0]
    log.info("fusion of %d subsystems: %d iterations, cross-entropy %.6f nats", S, n_iter, value)
    return FusionModel(params[:S], params[S:], list(order), held_out)


def fusion_apply(model, subsystem_scores):
    X = _stack(subsystem_scores)
    if len(model.weights) != X.shape[0]:
        raise DataError(f"model has {len(model.weights)} weights, got {X.shape[0]} subsystems")
    ref = subsystem_scores[0]
    if ref.language_order != model.language_order:
        raise DataError("score language order differs from the fusion model")
    fused = np.tensordot(model.weights, X, axes=1) + model.beta
    return ScoreMatrix(ref.utt_ids, ref.language_order, fused, "raw")


def _cluster_members(language_order, clusters):
    missing = [lang for lang in language_order if lang not in clusters]
    if missing:
        raise DataError(f"no cluster assigned to language(s) {missing}")
    groups = {}
    for i, lang in enumerate(language_order):
        groups.setdefault(clusters[lang], []).append(i)
    return groups


def to_llr_per_cluster(scores, clusters):
    """Detection LLRs against the mean likelihood of the other cluster members.

    ``clusters`` maps language -> cluster label.  Languages of other
    clusters never enter a denominator; a singleton cluster keeps its raw
    score.
    """
    s = scores.scores
    out = np.empty_like(s)
    for cluster, idx in _cluster_members(scores.language_order, clusters).items():
        if len(idx) == 1:
            warnings.warn(f"cluster {cluster!r} has one language; its score is left unchanged",
                          LidWarning, stacklevel=2)
            out[:, idx[0]] = s[:, idx[0]]
            continue
        block = s[:, idx]
        for j, col in enumerate(idx):
            others = np.delete(block, j, axis=1)
            out[:, col] = block[:, j] - (logsumexp(others, axis=1) - np.log(len(idx) - 1))
    return ScoreMatrix(scores.utt_ids, scores.language_order, out, "llr")


def _trials_by_language(scores, labels):
    y = label_indices(labels, scores.language_order)
    return y, np.bincount(y, minlength=scores.n_languages)


def compute_cavg(llr, labels, clusters):
    """Within-cluster average detection cost at threshold 0.

    Returns ``(cavg_overall, {cluster: cavg})``.  Trials count for the
    cluster of their true language; languages without trials are skipped.
    """
    if llr.score_kind != "llr":
        raise DataError(f"Cavg needs llr scores, got {llr.score_kind!r}")
    y, counts = _trials_by_language(llr, labels)
    per_cluster = {}
    for cluster, idx in sorted(_cluster_members(llr.language_order, clusters).items()):
        present = [i for i in idx if counts[i] > 0]
        for i in idx:
            if counts[i] == 0:
                warnings.warn(f"language {llr.language_order[i]!r} has no trials; excluded from Cavg",
                              LidWarning, stacklevel=2)
        if not present:
            continue
        costs = []
        for l in present:
            p_miss = np.mean(llr.scores[y == l, l] <= 0)
            others = [k for k in present if k != l]
            p_fa = np.mean([np.mean(llr.scores[y == k, l] > 0) for k in others]) if others else 0.0
            costs.append(0.5 * (p_miss + p_fa))
        per_cluster[cluster] = float(np.mean(costs))
    if not per_cluster:
        raise DataError("no trials to evaluate")
    return float(np.mean(list(per_cluster.values()))), per_cluster


def cllr_trial_costs(llr, labels, clusters):
    """Per-trial cost in bits, ``-log2`` of the flat-prior posterior of the true language.

    With detection LLRs against the mean of the other ``n - 1`` cluster
    members this is ``log2(1 + (n - 1) exp(-llr_true))``.
    """
    y, _ = _trials_by_language(llr, labels)
    groups = _cluster_members(llr.language_order, clusters)
    size = {i: len(idx) for idx in groups.values() for i in idx}
    n = np.array([size[t] for t in y], dtype=np.float64)
    true_llr = llr.scores[np.arange(len(y)), y]
    # direct form keeps exact values exact (all-zero llrs cost exactly log2(n));
    # very negative llrs switch to the asymptote to avoid overflow
    huge = (-true_llr > 500.0) & (n > 1)
    z = (n - 1) * np.exp(np.where(huge, 0.0, -true_llr))
    costs = np.where(huge, (np.log(np.maximum(n - 1, 1e-300)) - true_llr) / np.log(2.0), np.log2(1.0 + z))
    return costs, y


def compute_cllr(llr, labels, clusters):
    """Trial costs averaged per language, then per cluster, then over clusters."""
    if llr.score_kind != "llr":
        raise DataError(f"Cllr needs llr scores, got {llr.score_kind!r}")
    costs, y = cllr_trial_costs(llr, labels, clusters)
    per_cluster = []
    for _, idx in sorted(_cluster_members(llr.language_order, clusters).items()):
        lang_means = [costs[y == i].mean() for i in idx if np.any(y == i)]
        if lang_means:
            per_cluster.append(np.mean(lang_means))
    if not per_cluster:
        raise DataError("no trials to evaluate")
    return float(np.mean(per_cluster))


def accuracy(scores, labels):
    y = label_indices(labels, scores.language_order)
    return float(np.mean(np.argmax(scores.scores, axis=1) == y))


def confusion_matrix(scores, labels):
    y = label_indices(labels, scores.language_order)
    L = scores.n_languages
    conf = np.zeros((L, L), dtype=int)
    np.add.at(conf, (y, np.argmax(scores.scores, axis=1)), 1)
    return conf


@dataclass
class EvalReport:
    accuracy: float
    cavg_overall: float
    cavg_per_cluster: dict
    cllr: float
    confusion: np.ndarray
    language_order: list
    extra: dict = field(default_factory=dict)   # further key -> value lines, e.g. skipped utterances

    def items(self):
        rows = [("accuracy", self.accuracy), ("cavg_overall", self.cavg_overall)]
        rows += [(f"cavg.{c}", v) for c, v in sorted(self.cavg_per_cluster.items())]
        rows.append(("cllr", self.cllr))
        rows += sorted(self.extra.items())
        return rows

    def to_text(self):
        def fmt(v):
            return "%.10g" % v if isinstance(v, float) else str(v)
        lines = [f"{k}: {fmt(v)}" for k, v in self.items()]
        lines.append("confusion: " + " ".join(self.language_order))
        for lang, row in zip(self.language_order, self.confusion):
            lines.append(f"  {lang}: " + " ".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"

    def to_table(self):
        """Tab-separated ``key  value`` rows, header included."""
        body = "".join(f"{k}\t{v!r}\n" if isinstance(v, float) else f"{k}\t{v}\n" for k, v in self.items())
        return "key\tvalue\n" + body


def parse_report(text):
    """Read the ``key: value`` lines of ``EvalReport.to_text`` back into a dict."""
    out = {}
    for line in text.splitlines():
        if line.startswith(" ") or ":" not in line:
            continue
        key, value = line.split(":", 1)
        value = value.strip()
        try:
            out[key] = float(value)
        except ValueError:
            out[key] = value
    return out


def evaluate(raw_scores, llr, labels, clusters, extra=None):
    """Accuracy from ``raw_scores`` (argmax), costs from the cluster LLRs."""
    cavg, per_cluster = compute_cavg(llr, labels, clusters)
    return EvalReport(accuracy(raw_scores, labels), cavg, per_cluster,
                      compute_cllr(llr, labels, clusters), confusion_matrix(raw_scores, labels),
                      list(raw_scores.language_order), dict(extra or {}))
