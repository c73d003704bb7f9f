import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidkit.backends import mclr_objective, mclr_train
from lidkit.backends.mclr import affine_xent
from lidkit.errors import AlignmentError, DataError, LidWarning
from lidkit.fusion import (EvalReport, FusionModel, accuracy, cllr_trial_costs, compute_cavg, compute_cllr,
                           confusion_matrix, evaluate, fold_assignment, fusion_apply, fusion_train, fusion_xent,
                           parse_report, to_llr_per_cluster)
from lidkit.scores import ScoreMatrix

LANGS = ["a", "b", "c", "d"]


def labelled_scores(rng, N=400, L=4, strength=1.5, noise=1.0):
    y = np.arange(N) % L
    s = noise * rng.normal(size=(N, L))
    s[np.arange(N), y] += strength
    langs = LANGS[:L] if L <= 4 else [f"l{i}" for i in range(L)]
    return ScoreMatrix([f"utt{i:05d}" for i in range(N)], langs, s), [langs[i] for i in y], y


def llr(s, utts=None):
    s = np.atleast_2d(np.asarray(s, dtype=float))
    return ScoreMatrix(utts or [f"u{i}" for i in range(len(s))], LANGS[:s.shape[1]], s, "llr")


# -- fusion training

def test_single_subsystem_equals_mclr(rng):
    s, labels, _ = labelled_scores(rng)
    model = fusion_train([s], labels)
    m = mclr_train(s, labels)
    assert abs(fusion_xent(model, [s], labels) - mclr_objective(m.alpha, m.beta, s, labels)) < 1e-8
    assert abs(model.weights[0] - m.alpha) < 1e-6


def test_duplicate_subsystem_same_held_out(rng):
    s, labels, _ = labelled_scores(rng)
    one = fusion_train([s], labels)
    two = fusion_train([s, s], labels)
    assert len(two.fold_xent) == len(one.fold_xent) == 2
    np.testing.assert_allclose(two.fold_xent, one.fold_xent, atol=1e-6)
    assert abs(fusion_xent(two, [s, s], labels) - fusion_xent(one, [s], labels)) < 1e-8


def complementary(rng, N=2000):
    y = np.arange(N) % 4
    a = rng.normal(size=(N, 4))
    b = rng.normal(size=(N, 4))
    # a separates a/b from each other, b separates c/d; each is blind to the other pair
    a[np.arange(N), y] += np.where(y < 2, 2.0, 0.0)
    b[np.arange(N), y] += np.where(y >= 2, 2.0, 0.0)
    a[:, 2:] = a[:, 2:].mean(axis=1, keepdims=True)
    b[:, :2] = b[:, :2].mean(axis=1, keepdims=True)
    utts = [f"utt{i:05d}" for i in range(N)]
    return ScoreMatrix(utts, LANGS, a), ScoreMatrix(utts, LANGS, b), [LANGS[i] for i in y]


def test_complementary_subsystems_fuse_better(rng):
    a, b, labels = complementary(rng)
    fa = fusion_train([a], labels).mean_fold_xent
    fb = fusion_train([b], labels).mean_fold_xent
    fused = fusion_train([a, b], labels).mean_fold_xent
    assert fused <= min(fa, fb) - 0.01
    # the single subsystems are nested in the fusion family
    assert fused <= fa + 1e-6 and fused <= fb + 1e-6


def test_fusion_gradient_matches_finite_differences(rng):
    for _ in range(10):
        S, N, L = rng.integers(2, 5), 25, rng.integers(2, 5)
        X = rng.normal(size=(S, N, L)) * 2
        y = np.arange(N) % L
        p = rng.normal(size=S + L)
        _, g = affine_xent(p, X, y)
        fd = np.array([(affine_xent(p + 1e-6 * e, X, y)[0] - affine_xent(p - 1e-6 * e, X, y)[0]) / 2e-6
                       for e in np.eye(S + L)])
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


def test_fusion_objective_convex(rng):
    X = rng.normal(size=(3, 60, 4))
    y = np.arange(60) % 4
    f = lambda p: affine_xent(p, X, y)[0]
    for _ in range(200):
        p, q = rng.normal(size=(2, 7)) * 3
        assert f(0.5 * (p + q)) <= 0.5 * (f(p) + f(q)) + 1e-9


def test_fusion_misaligned(rng):
    s, labels, _ = labelled_scores(rng, 20)
    other = ScoreMatrix(s.utt_ids[::-1], s.language_order, s.scores)
    with pytest.raises(AlignmentError):
        fusion_train([s, other], labels)
    with pytest.raises(AlignmentError):
        fusion_apply(FusionModel([1.0, 1.0], np.zeros(4), LANGS), [s, other])


def test_fusion_needs_two_folds(rng):
    s, labels, _ = labelled_scores(rng, 20)
    with pytest.raises(ValueError):
        fusion_train([s], labels, folds=1)


def test_fold_assignment_is_stable():
    ids = [f"utt{i}" for i in range(1000)]
    f = fold_assignment(ids, 2)
    np.testing.assert_array_equal(f, fold_assignment(ids, 2))
    assert 0.45 < f.mean() < 0.55


# -- fusion application

def test_fusion_apply_identity(rng):
    s, _, _ = labelled_scores(rng, 10)
    out = fusion_apply(FusionModel([1.0], np.zeros(4), LANGS), [s])
    np.testing.assert_array_equal(out.scores, s.scores)


def test_fusion_apply_zero_weights(rng):
    s, _, _ = labelled_scores(rng, 10)
    beta = rng.normal(size=4)
    out = fusion_apply(FusionModel([0.0, 0.0], beta, LANGS), [s, s])
    np.testing.assert_array_equal(out.scores, np.tile(beta, (10, 1)))


def test_fusion_apply_formula(rng):
    subs = [labelled_scores(rng, 15)[0] for _ in range(3)]
    w, beta = rng.normal(size=3), rng.normal(size=4)
    out = fusion_apply(FusionModel(w, beta, LANGS), subs)
    ref = w[0] * subs[0].scores + w[1] * subs[1].scores + w[2] * subs[2].scores + beta
    np.testing.assert_allclose(out.scores, ref, rtol=0, atol=1e-12)


def test_fusion_apply_checks_weight_count(rng):
    s, _, _ = labelled_scores(rng, 5)
    with pytest.raises(DataError):
        fusion_apply(FusionModel([1.0, 1.0], np.zeros(4), LANGS), [s])


# -- per-cluster LLRs

CLUSTERS = {"a": "x", "b": "x", "c": "y", "d": "y"}


def test_two_language_cluster_is_difference(rng):
    s = ScoreMatrix(["u", "v"], LANGS, rng.normal(size=(2, 4)))
    out = to_llr_per_cluster(s, CLUSTERS).scores
    np.testing.assert_array_equal(out[:, 0], s.scores[:, 0] - s.scores[:, 1])
    np.testing.assert_array_equal(out[:, 3], s.scores[:, 3] - s.scores[:, 2])


def test_uniform_cluster_scores_give_zero(rng):
    s = ScoreMatrix(["u"], LANGS, [[3.0, 3.0, -1.0, -1.0]])
    np.testing.assert_allclose(to_llr_per_cluster(s, CLUSTERS).scores, 0, atol=1e-12)


def test_four_language_cluster_matches_high_precision(rng):
    mpmath.mp.dps = 50
    one = {l: "x" for l in LANGS}
    s = ScoreMatrix([f"u{i}" for i in range(20)], LANGS, rng.normal(scale=20, size=(20, 4)))
    out = to_llr_per_cluster(s, one).scores
    for t in range(20):
        for l in range(4):
            others = [mpmath.exp(mpmath.mpf(s.scores[t, k])) for k in range(4) if k != l]
            ref = mpmath.mpf(s.scores[t, l]) - mpmath.log(mpmath.fsum(others) / 3)
            assert abs(out[t, l] - float(ref)) < 1e-12


def test_other_clusters_do_not_enter_denominator(rng):
    s = rng.normal(size=(5, 4))
    a = to_llr_per_cluster(ScoreMatrix([str(i) for i in range(5)], LANGS, s), CLUSTERS).scores
    s[:, 2:] += 100.0 * rng.normal(size=(5, 2))
    b = to_llr_per_cluster(ScoreMatrix([str(i) for i in range(5)], LANGS, s), CLUSTERS).scores
    np.testing.assert_array_equal(a[:, :2], b[:, :2])


def test_singleton_cluster_unchanged(rng):
    s = ScoreMatrix(["u"], LANGS[:3], rng.normal(size=(1, 3)))
    with pytest.warns(LidWarning, match="one language"):
        out = to_llr_per_cluster(s, {"a": "x", "b": "x", "c": "z"})
    assert out.scores[0, 2] == s.scores[0, 2]


def test_unassigned_language_rejected(rng):
    s = ScoreMatrix(["u"], LANGS, rng.normal(size=(1, 4)))
    with pytest.raises(DataError):
        to_llr_per_cluster(s, {"a": "x", "b": "x", "c": "y"})


# -- Cavg

def oracle_llrs(y, L=4, size=10.0):
    s = np.full((len(y), L), -size)
    s[np.arange(len(y)), y] = size
    return s


def test_cavg_perfect_and_inverted():
    y = np.arange(40) % 4
    labels = [LANGS[i] for i in y]
    s = oracle_llrs(y)
    assert compute_cavg(llr(s), labels, CLUSTERS)[0] == 0.0
    overall, per = compute_cavg(llr(-s), labels, CLUSTERS)
    assert overall == 1.0 and per == {"x": 1.0, "y": 1.0}


def test_cavg_random_scores_half(rng):
    y = np.arange(1000) % 2
    overall, _ = compute_cavg(llr(rng.normal(size=(1000, 2))), [LANGS[i] for i in y], {"a": "x", "b": "x"})
    assert abs(overall - 0.5) < 0.05


def test_cavg_hand_computed():
    # target a: 1 miss of 2, b-trials 1 of 2 false alarms on a -> (0.5 + 0.5) / 2
    # target b: 0 misses, a-trials 0 false alarms on b -> 0
    s = [[1.0, -1.0], [-1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]
    overall, per = compute_cavg(llr(s), ["a", "a", "b", "b"], {"a": "x", "b": "x"})
    assert per["x"] == 0.25 and overall == 0.25


def test_cavg_excludes_languages_without_trials(rng):
    y = np.array([0, 1, 0, 1, 2, 2])
    with pytest.warns(LidWarning, match="no trials"):
        overall, per = compute_cavg(llr(oracle_llrs(y)), [LANGS[i] for i in y], CLUSTERS)
    assert overall == 0.0 and set(per) == {"x", "y"}


def test_cavg_needs_llr_kind(rng):
    s = ScoreMatrix(["u"], ["a", "b"], [[1.0, 0.0]], "raw")
    with pytest.raises(DataError):
        compute_cavg(s, ["a"], {"a": "x", "b": "x"})


def test_cavg_invariant_to_cluster_shift(rng):
    s, labels, _ = labelled_scores(rng, 200)
    base = compute_cavg(to_llr_per_cluster(s, CLUSTERS), labels, CLUSTERS)
    shifted = s.scores.copy()
    shifted[:, :2] += rng.normal(size=(200, 1)) * 5
    shifted[:, 2:] -= 3.0
    again = compute_cavg(to_llr_per_cluster(ScoreMatrix(s.utt_ids, LANGS, shifted), CLUSTERS), labels, CLUSTERS)
    assert base == again


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 5))
def test_cavg_monotone_in_target_llrs(seed, boost):
    r = np.random.default_rng(seed)
    y = np.arange(60) % 4
    s = r.normal(size=(60, 4))
    labels = [LANGS[i] for i in y]
    before = compute_cavg(llr(s), labels, CLUSTERS)[0]
    s[np.arange(60), y] += boost
    assert compute_cavg(llr(s), labels, CLUSTERS)[0] <= before


# -- Cllr and accuracy

def test_cllr_oracle_near_zero():
    y = np.arange(40) % 4
    assert compute_cllr(llr(oracle_llrs(y)), [LANGS[i] for i in y], CLUSTERS) < 0.01


@pytest.mark.parametrize("size", [2, 3, 4])
def test_cllr_zero_llrs_cost_log2_cluster_size(size):
    clusters = {l: "x" for l in LANGS[:size]}
    y = np.arange(12) % size
    costs, _ = cllr_trial_costs(llr(np.zeros((12, size))), [LANGS[i] for i in y], clusters)
    np.testing.assert_array_equal(costs, np.log2(size))


def test_cllr_cost_is_posterior_of_true_language(rng):
    one = {l: "x" for l in LANGS}
    raw = rng.normal(size=(30, 4)) * 3
    y = np.arange(30) % 4
    l_ = to_llr_per_cluster(ScoreMatrix([str(i) for i in range(30)], LANGS, raw), one)
    costs, _ = cllr_trial_costs(l_, [LANGS[i] for i in y], one)
    post = np.exp(raw - raw.max(axis=1, keepdims=True))
    post /= post.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(costs, -np.log2(post[np.arange(30), y]), rtol=1e-10)


def test_cllr_better_separation_lower(rng):
    weak, labels, _ = labelled_scores(rng, 400, strength=1.0)
    strong = ScoreMatrix(weak.utt_ids, LANGS, weak.scores + 2.0 * (np.arange(4) == (np.arange(400) % 4)[:, None]))
    cw = compute_cllr(to_llr_per_cluster(weak, CLUSTERS), labels, CLUSTERS)
    cs = compute_cllr(to_llr_per_cluster(strong, CLUSTERS), labels, CLUSTERS)
    assert cs < cw


def test_accuracy_and_confusion(rng):
    s, labels, y = labelled_scores(rng, 100)
    pred = np.argmax(s.scores, axis=1)
    assert accuracy(s, labels) == np.mean(pred == y)
    conf = confusion_matrix(s, labels)
    np.testing.assert_array_equal(conf.sum(axis=1), np.bincount(y, minlength=4))
    assert np.trace(conf) == np.sum(pred == y)


# -- reports

def test_report_keys_and_round_trip(rng):
    s, labels, _ = labelled_scores(rng, 80)
    rep = evaluate(s, to_llr_per_cluster(s, CLUSTERS), labels, CLUSTERS, {"skipped_utterances": 0})
    keys = [k for k, _ in rep.items()]
    assert keys[:5] == ["accuracy", "cavg_overall", "cavg.x", "cavg.y", "cllr"]
    parsed = parse_report(rep.to_text())
    for k, v in rep.items():
        assert parsed[k] == pytest.approx(v, rel=1e-9)
    rows = rep.to_table().splitlines()
    assert rows[0] == "key\tvalue" and rows[1].startswith("accuracy\t")
    assert float(rows[1].split("\t")[1]) == rep.accuracy
    assert 0 <= rep.accuracy <= 1 and rep.cavg_overall >= 0
