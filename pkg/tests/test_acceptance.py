"""Acceptance suite: one test per criterion, summarised at the end of the run."""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import block_diag
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from lidkit.backends import gb_score, gb_train, pairnet_loss_and_grad, plda_score, plda_train
from lidkit.backends.mclr import affine_xent
from lidkit.backends.pairnet import PairNet
from lidkit.backends.plda import PldaModel
from lidkit.cli import main
from lidkit.frontend import FeatureMatrix, SdcConfig, build_sdc, sdc_mfcc
from lidkit.fusion import cllr_trial_costs, compute_cavg, compute_cllr, parse_report, to_llr_per_cluster
from lidkit.gmm import BwStats, GmmModel, refine_full_gmm, train_diag_gmm
from lidkit.scores import ScoreMatrix
from lidkit.tv import (TvModel, apply_normalizer, extract_ivector, fit_normalizer, minimum_divergence,
                       train_tv, tv_log_likelihood)
from lidkit.tv import _posterior_system, _posteriors, _Projections, _stack

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
BACKENDS = ("gb_mclr", "plda", "svm", "pairnet")


def random_ubm(rng, K, F, full=False):
    w = rng.dirichlet(np.ones(K))
    means = rng.normal(size=(K, F))
    if full:
        A = rng.normal(size=(K, F, F))
        return GmmModel(w, means, A @ A.transpose(0, 2, 1) + 0.5 * np.eye(F), "full")
    return GmmModel(w, means, rng.uniform(0.3, 2.0, size=(K, F)))


def random_stats(rng, ubm, U):
    K, F = ubm.means.shape
    out = []
    for _ in range(U):
        n = rng.uniform(1, 50, size=K)
        out.append(BwStats(n, n[:, None] * (ubm.means + rng.normal(size=(K, F))), int(n.sum())))
    return out


def non_decreasing(values, rel=1e-8):
    return all(b >= a - rel * abs(a) for a, b in zip(values, values[1:]))


def same_size_non_decreasing(trace, rel=1e-8):
    return all(b >= a - rel * abs(a) for (k0, a), (k1, b) in zip(trace, trace[1:]) if k0 == k1)


# -- 1

@pytest.mark.criterion(1, "SDC 7-1-3-7 equals brute-force stacking; 56 dims")
def test_criterion_1_sdc():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    N, d, P, k = 7, 1, 3, 7
    for _ in range(100):
        n = int(rng.integers(1, 400))
        c = rng.normal(size=(n, 7)) * 5
        got = build_sdc(FeatureMatrix.unmasked(c), SdcConfig(N, d, P, k)).data
        ref = np.zeros((n, N * k))
        for t in range(n):
            for j in range(k):
                hi = min(max(t + j * P + d, 0), n - 1)
                lo = min(max(t + j * P - d, 0), n - 1)
                ref[t, j * N:(j + 1) * N] = c[hi] - c[lo]
        assert np.max(np.abs(got - ref), initial=0.0) <= 1e-12
        assert sdc_mfcc(FeatureMatrix.unmasked(c)).dim == 56
    assert time.perf_counter() - start < 5.0


# -- 2

@pytest.mark.criterion(2, "EM objectives non-decreasing over 20 seeds")
def test_criterion_2_em_monotonicity():
    start = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        centers = rng.normal(scale=3, size=(8, 4))
        x = np.vstack([rng.normal(c, rng.uniform(0.3, 1.5), size=(250, 4)) for c in centers])
        for K in (4, 16, 64):
            trace = []
            model = train_diag_gmm(x, K, iters=5, seed=seed, trace=trace)
            assert same_size_non_decreasing(trace), (seed, K)
        trace = []
        refine_full_gmm(train_diag_gmm(x, 4, iters=3, seed=seed), x, iters=5, trace=trace)
        assert same_size_non_decreasing(trace), (seed, "full")

        ubm = random_ubm(rng, 4, 3)
        trace = []
        train_tv(random_stats(rng, ubm, 30), ubm, 3, iters=6, seed=seed, trace=trace)
        assert non_decreasing(trace), (seed, "tv")

        xs = np.vstack([rng.normal(m, 1.0, size=(10, 6)) for m in rng.normal(scale=2, size=(8, 6))])
        labels = np.repeat([f"l{i}" for i in range(8)], 10)
        trace = []
        plda_train(xs, labels, 3, iters=10, trace=trace)
        assert non_decreasing(trace), (seed, "plda")
    assert time.perf_counter() - start < 180.0


# -- 3

@pytest.mark.criterion(3, "i-vector extraction equals the dense closed form")
def test_criterion_3_ivector_closed_form():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    for case in range(50):
        ubm = random_ubm(rng, 2, 2, full=case % 2 == 1)
        tv = TvModel(rng.normal(size=(4, 2)), ubm, rng.normal(size=4))
        st = random_stats(rng, ubm, 1)[0]
        covs = [ubm.covariances[k] if ubm.covariance_kind == "full" else np.diag(ubm.covariances[k])
                for k in range(2)]
        S_inv = np.linalg.inv(block_diag(*covs))
        N = np.kron(np.diag(st.n), np.eye(2))
        f = (st.f - st.n[:, None] * (ubm.means + tv.bias.reshape(2, 2))).reshape(-1)
        T = tv.T
        ref = np.linalg.solve(np.eye(2) + T.T @ S_inv @ N @ T, T.T @ S_inv @ f)
        assert np.max(np.abs(extract_ivector(tv, st) - ref)) <= 1e-10
    assert time.perf_counter() - start < 5.0


# -- 4

@pytest.mark.criterion(4, "whitening, length norm and minimum-divergence invariance")
def test_criterion_4_normalization():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(500, 10)) @ rng.normal(size=(10, 10)) + rng.normal(size=10)
    white = apply_normalizer(fit_normalizer(x), x)
    assert np.max(np.abs(np.cov(white.T, bias=True) - np.eye(10))) <= 1e-8

    unit = apply_normalizer(fit_normalizer(x, length_norm=True), rng.normal(size=(1000, 10)) * 100)
    assert np.max(np.abs(np.linalg.norm(unit, axis=1) - 1)) <= 1e-12

    ubm = random_ubm(rng, 3, 2, full=True)
    stats = random_stats(rng, ubm, 20)
    tv = TvModel(0.5 * rng.normal(size=(6, 3)), ubm, 0.1 * rng.normal(size=6))
    N, Fc = _stack(stats, ubm, tv.bias)
    w, cov, _ = _posteriors(*_posterior_system(_Projections(tv.T, ubm), N, Fc))
    T2, b2, _, _ = minimum_divergence(tv.T, tv.bias, w, cov)
    mu = w.mean(axis=0)
    G = (cov.sum(axis=0) + w.T @ w) / len(w) - np.outer(mu, mu)
    before = tv_log_likelihood(stats, ubm, tv.T, tv.bias, prior_mean=mu, prior_cov=G)
    after = tv_log_likelihood(stats, ubm, T2, b2)
    assert abs(after - before) <= 1e-8 * abs(before)


# -- 5

def _fd(f, p, h=1e-6):
    out = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = f()
        p[idx] = old - h
        down = f()
        p[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.mark.criterion(5, "MCLR, fusion and pairnet gradients match finite differences")
def test_criterion_5_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    for S in (1, 1, 1, 2, 3, 4):   # one subsystem is MCLR calibration, more is fusion
        L, n = int(rng.integers(2, 6)), 40
        X = rng.normal(size=(S, n, L)) * 2
        y = np.arange(n) % L
        p = rng.normal(size=S + L)
        _, g = affine_xent(p, X, y)
        assert _rel(g, _fd(lambda: affine_xent(p, X, y)[0], p)) < 1e-5
    for _ in range(3):
        net = PairNet(input_mean=rng.normal(size=4), input_scale=rng.uniform(0.5, 2, size=4))
        net.layers.append((rng.normal(size=(6, 4)), rng.normal(size=6)))
        net.final_linear = rng.normal(size=(3, 6))
        net.scale[:] = 4.0
        xa, xb = rng.normal(size=(2, 5, 4))
        same = np.array([1, 0, 0, 1, 1])
        _, grads = pairnet_loss_and_grad(net, xa, xb, same)
        for name, param in net.parameters().items():
            fd = _fd(lambda: pairnet_loss_and_grad(net, xa, xb, same)[0], param)
            assert _rel(grads[name], fd) < 1e-4, name
    assert time.perf_counter() - start < 60.0


# -- 6

@pytest.mark.criterion(6, "Gaussian back-end, PLDA and cluster LLR match dense oracles")
def test_criterion_6_backend_oracles():
    rng = np.random.default_rng(6)
    x = np.vstack([rng.normal(m, 1.0, size=(20, 5)) for m in rng.normal(scale=2, size=(3, 5))])
    labels = np.repeat(["a", "b", "c"], 20)
    gb = gb_train(x, labels, 0.1)
    probes = rng.normal(size=(10, 5))
    s = gb_score(gb, probes)
    for i in range(3):
        ref = multivariate_normal(gb.means[i], gb.sigma_smoothed[i]).logpdf(probes)
        assert np.max(np.abs(s[:, i] - ref)) <= 1e-10

    R = 4
    A = rng.normal(size=(R, R))
    model = PldaModel(rng.normal(size=R), rng.normal(size=(R, 2)), A @ A.T + 0.5 * np.eye(R))
    B, W = model.F @ model.F.T, model.sigma_w

    def joint(vectors):
        n = len(vectors)
        cov = np.kron(np.ones((n, n)), B) + np.kron(np.eye(n), W)
        return multivariate_normal(np.tile(model.mu, n), cov).logpdf(np.concatenate(vectors))

    enroll = {"a": rng.normal(size=(1, R)), "b": rng.normal(size=(3, R)), "c": rng.normal(size=(5, R))}
    tests = rng.normal(size=(6, R))
    s = plda_score(model, enroll, tests)
    for j, t in enumerate(tests):
        for i, lang in enumerate(sorted(enroll)):
            ref = joint(list(enroll[lang]) + [t]) - joint(list(enroll[lang])) - joint([t])
            assert abs(s[j, i] - ref) <= 1e-8

    langs = ["a", "b", "c", "d", "e"]
    clusters = {"a": "x", "b": "x", "c": "x", "d": "y", "e": "y"}
    raw = rng.normal(scale=5, size=(20, 5))
    out = to_llr_per_cluster(ScoreMatrix([str(i) for i in range(20)], langs, raw), clusters).scores
    for l, lang in enumerate(langs):
        members = [k for k in range(5) if clusters[langs[k]] == clusters[lang] and k != l]
        ref = raw[:, l] - logsumexp(raw[:, members], axis=1) + np.log(len(members))
        assert np.max(np.abs(out[:, l] - ref)) <= 1e-12


# -- 7 and 8

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    (root / "configs").mkdir()
    config = root / "configs" / "desk.ini"
    config.write_text(DESK_CONFIG.read_text())
    start = time.perf_counter()
    assert main(["synth", "--config", str(config)]) == 0
    assert main(["run", "--config", str(config), "--jobs", "4"]) == 0
    return root, config, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.criterion(7, "end-to-end synthetic regression: back-end accuracy, fused Cavg")
def test_criterion_7_end_to_end(desk_run):
    root, _, elapsed = desk_run
    report = parse_report((root / "out" / "report.txt").read_text())
    for name in BACKENDS:
        assert report[f"backend.{name}.accuracy"] >= 0.90, name
    best_single = min(report[f"backend.{name}.cavg"] for name in BACKENDS)
    assert report["cavg_overall"] <= best_single + 0.01
    assert report["cavg_overall"] <= 0.05
    assert elapsed < 600.0


@pytest.mark.slow
@pytest.mark.criterion(8, "two identical runs give byte-identical scores and reports")
def test_criterion_8_determinism(desk_run):
    root, config, _ = desk_run
    out = root / "out"
    first = {p.relative_to(out): p.read_bytes()
             for p in sorted(out.glob("scores/*.tsv")) + [out / "report.txt", out / "report.tsv"]}
    assert main(["run", "--config", str(config), "--jobs", "4", "--force"]) == 0
    second = {rel: (out / rel).read_bytes() for rel in first}
    assert len(first) >= 2 * len(BACKENDS) + 3
    for rel in first:
        assert first[rel] == second[rel], rel


# -- 9

@pytest.mark.criterion(9, "metric sanity: oracle, inverted and all-zero LLRs")
def test_criterion_9_metric_sanity():
    langs = ["a", "b", "c", "d", "e"]
    clusters = {"a": "x", "b": "x", "c": "x", "d": "y", "e": "y"}
    y = np.arange(50) % 5
    labels = [langs[i] for i in y]
    oracle = np.full((50, 5), -20.0)
    oracle[np.arange(50), y] = 20.0

    def llr(s):
        return ScoreMatrix([f"u{i}" for i in range(50)], langs, s, "llr")

    assert compute_cavg(llr(oracle), labels, clusters)[0] == 0.0
    assert compute_cllr(llr(oracle), labels, clusters) < 0.01
    assert compute_cavg(llr(-oracle), labels, clusters)[0] == 1.0
    costs, truth = cllr_trial_costs(llr(np.zeros((50, 5))), labels, clusters)
    sizes = np.array([3 if clusters[langs[t]] == "x" else 2 for t in truth])
    assert np.array_equal(costs, np.log2(sizes))
