"""Staged experiment runner with on-disk caching.

Stages run in order: features, ubm, stats, tv, ivectors, normalizer,
backends, fusion, eval.  Each stage's key is a digest of its own config
section(s) chained with the key of the stage before it.  A stage is skipped
when its completion record under ``<output_dir>/stages`` carries the same
key and every listed output still exists; ``force`` recomputes everything.
Containers also carry the key in their header (``info.stage_key``).

Data flow: UBM, TV, normaliser and back-ends are trained on the ``train``
split, fusion on ``dev``, and the report is computed on ``eval``.
"""

import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backends.gaussian import gb_score, gb_train
from .backends.mclr import mclr_train
from .backends.pairnet import pairnet_centroids, pairnet_score, pairnet_train
from .backends.plda import plda_enroll, plda_score, plda_train
from .backends.svm import svm_score, svm_train
from .container import Centroids, IvectorArchive, StatsArchive, load_model, save_model
from .corpus import language_clusters, load_manifest, read_wav
from .errors import DataError, EmptyInputError, InsufficientDataError, LidWarning
from .frontend import FeatureMatrix, compute_features, read_feature_dump, write_feature_dump
from .fusion import evaluate, fusion_apply, fusion_train, to_llr_per_cluster
from .gmm import accumulate_stats, map_supervector, refine_full_gmm, train_diag_gmm
from .scores import ScoreMatrix, read_scores_tsv, write_scores_tsv
from .tv import apply_normalizer, extract_ivectors, fit_normalizer, train_tv, training_subset

log = logging.getLogger(__name__)

STAGES = ("features", "ubm", "stats", "tv", "ivectors", "normalizer", "backends", "fusion", "eval")


class StageError(Exception):
    """Wraps a failure with the name of the stage it happened in."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _digest(*parts):
    h = hashlib.sha1()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha1(fh.read()).hexdigest()


def _quantized(feat):
    # the feature cache stores float32; in-memory features go through the same rounding
    return FeatureMatrix(feat.data.astype(np.float32).astype(np.float64), feat.mask)


def _features_job(args):
    """Worker: features of one utterance.  Returns ``(utt_id, skip_reason or None, feat or None)``."""
    utt_id, audio_path, recipe, dump_path = args
    try:
        feat = compute_features(read_wav(audio_path), recipe)
    except EmptyInputError as exc:
        return utt_id, f"shorter than one analysis window ({exc})", None
    except InsufficientDataError as exc:
        return utt_id, str(exc), None
    if dump_path is None:
        return utt_id, None, _quantized(feat)
    write_feature_dump(feat, dump_path)
    return utt_id, None, None


def _stats_job(args):
    ubm, dump_path = args
    return accumulate_stats(ubm, read_feature_dump(dump_path))


def _map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def compute_utterance_features(records, recipe, jobs=1, dump_dir=None):
    """Features for many utterances; short or silent ones are skipped with a warning.

    Returns ``(features by utt_id, {utt_id: reason})``.  With ``dump_dir`` the
    features are written as dumps instead of returned.
    """
    args = [(r.utt_id, r.audio_path, recipe,
             None if dump_dir is None else os.path.join(dump_dir, r.utt_id + ".lidf")) for r in records]
    feats, skipped = {}, {}
    for utt, reason, feat in _map(_features_job, args, jobs):
        if reason is not None:
            warnings.warn(f"utterance {utt} skipped: {reason}", LidWarning, stacklevel=2)
            skipped[utt] = reason
        elif feat is not None:
            feats[utt] = feat
    return feats, skipped


# -- frozen system ----------------------------------------------------------------

@dataclass
class System:
    """Every trained model needed to score new audio."""
    ubm: object
    tv: object
    normalizer: object
    backends: dict                 # name -> dict of models
    fusion: object = None
    language_order: list = field(default_factory=list)


def backend_scores(name, models, ivectors, supervectors=None):
    """Raw score matrix (utterances x languages) of one back-end."""
    if name == "gb_mclr":
        mclr = models["mclr"]
        return mclr.alpha * gb_score(models["gb"], ivectors) + mclr.beta
    if name == "plda":
        return plda_score(models["plda"], models["enroll"], ivectors)
    if name == "svm":
        return svm_score(models["svm"], ivectors)
    if name == "pairnet":
        return pairnet_score(models["net"], models["centroids"].as_dict(), ivectors)
    if name == "tandem_svm":
        return svm_score(models["svm"], supervectors)
    raise DataError(f"unknown back-end {name!r}")


def _supervectors(ubm, stats, relevance):
    return np.stack([map_supervector(ubm, None, relevance, kl_normalize=True, stats=s) for s in stats])


def train_backend(name, cfg, X, labels, utt_ids, durations, supervectors=None):
    """Train one back-end on normalised training i-vectors; returns its models dict."""
    b = cfg["backends"]
    seed = cfg.seed
    if name == "gb_mclr":
        # Gaussian back-end on two thirds of the training set, MCLR on the rest
        part = training_subset(utt_ids)
        if part.all() or not part.any():
            raise DataError("training set too small to split for GB + MCLR")
        gb = gb_train(X[part], labels[part], b["gb_gamma"])
        held = ScoreMatrix(np.asarray(utt_ids)[~part], gb.language_order, gb_score(gb, X[~part]), "loglik")
        return {"gb": gb, "mclr": mclr_train(held, labels[~part])}
    if name == "plda":
        long_enough = durations >= b["min_duration_s"]
        dropped = int((~long_enough).sum())
        if dropped:
            log.info("PLDA training excludes %d utterances shorter than %.2f s", dropped, b["min_duration_s"])
        model = plda_train(X[long_enough], labels[long_enough], b["plda_rank"], b["plda_iters"])
        return {"plda": model, "enroll": plda_enroll(X, labels)}
    if name == "svm":
        return {"svm": svm_train(X, labels, b["svm_c"], b["svm_epochs"], seed)}
    if name == "pairnet":
        hidden = [int(h) for h in b["pairnet_hidden"]]
        net = pairnet_train(X, labels, hidden, b["pairnet_embedding"], b["pairnet_epochs"], b["pairnet_lr"],
                            seed, b["pairnet_rounds"])
        cents = pairnet_centroids(net, X, labels)
        order = sorted(cents)
        return {"net": net, "centroids": Centroids(order, np.stack([cents[k] for k in order]))}
    if name == "tandem_svm":
        return {"svm": svm_train(supervectors, labels, b["svm_c"], b["svm_epochs"], seed)}
    raise DataError(f"unknown back-end {name!r}")


# -- runner -------------------------------------------------------------------------

class Pipeline:
    def __init__(self, cfg, force=False, jobs=None):
        self.cfg = cfg
        self.force = force
        self.jobs = jobs or os.cpu_count() or 1
        self.out = cfg.output_dir
        try:
            self.records = load_manifest(cfg.manifest)
        except FileNotFoundError:
            raise DataError(f"manifest not found: {cfg.manifest}") from None
        self.by_id = {r.utt_id: r for r in self.records}
        self.clusters = language_clusters(self.records)
        self.keys = {}
        self.recomputed = []
        self._cache = {}

    # paths and completion records

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def _record_path(self, stage):
        return self.path("stages", stage + ".json")

    def _cached(self, stage, key):
        if self.force:
            return None
        try:
            with open(self._record_path(stage), encoding="utf-8") as fh:
                rec = json.load(fh)
        except (OSError, json.JSONDecodeError):
            return None
        if rec.get("key") != key or not all(os.path.exists(self.path(p)) for p in rec.get("outputs", [])):
            return None
        return rec

    def _complete(self, stage, key, outputs, **extra):
        os.makedirs(self.path("stages"), exist_ok=True)
        tmp = self._record_path(stage) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"key": key, "outputs": sorted(outputs), **extra}, fh, indent=1, sort_keys=True)
        os.replace(tmp, self._record_path(stage))

    def _save(self, obj, rel, key):
        os.makedirs(os.path.dirname(self.path(rel)), exist_ok=True)
        save_model(obj, self.path(rel), {"stage_key": key, "seed": self.cfg.seed})
        return rel

    def _load(self, rel):
        if rel not in self._cache:
            self._cache[rel] = load_model(self.path(rel))
        return self._cache[rel]

    def run(self, until="eval"):
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        for stage in STAGES[:STAGES.index(until) + 1]:
            try:
                getattr(self, "_stage_" + stage)()
            except Exception as exc:
                raise StageError(stage, exc) from exc
        return self

    def _stage(self, stage, key, compute):
        """Run ``compute(key)`` unless a matching completion record exists."""
        self.keys[stage] = key
        rec = self._cached(stage, key)
        if rec is not None:
            log.info("stage %s: cached", stage)
            return rec
        log.info("stage %s: computing", stage)
        outputs, extra = compute(key)
        self._complete(stage, key, outputs, **extra)
        self.recomputed.append(stage)
        return self._cached_record(stage)

    def _cached_record(self, stage):
        with open(self._record_path(stage), encoding="utf-8") as fh:
            return json.load(fh)

    # helpers over the manifest

    def usable(self, split=None):
        """Records with features, in manifest order."""
        skipped = self.skipped
        return [r for r in self.records if r.utt_id not in skipped and (split is None or r.split == split)]

    def labels(self, recs):
        return np.array([r.language for r in recs])

    # stages

    def _stage_features(self):
        cfg = self.cfg
        key = _digest(cfg["frontend"], _file_digest(cfg.manifest))

        def compute(key):
            dump_dir = self.path("features")
            os.makedirs(dump_dir, exist_ok=True)
            _, skipped = compute_utterance_features(self.records, cfg.recipe(), self.jobs, dump_dir)
            outputs = [os.path.join("features", r.utt_id + ".lidf") for r in self.records
                       if r.utt_id not in skipped]
            return outputs, {"skipped": skipped}

        rec = self._stage("features", key, compute)
        self.skipped = rec.get("skipped", {})

    def feature_path(self, utt_id):
        return self.path("features", utt_id + ".lidf")

    def _stage_ubm(self):
        cfg = self.cfg
        key = _digest(self.keys["features"], cfg["ubm"], cfg.seed)

        def compute(key):
            u = cfg["ubm"]
            train = self.usable("train")
            if not train:
                raise DataError("no usable training utterances")
            frames = np.vstack([read_feature_dump(self.feature_path(r.utt_id)).speech() for r in train])
            rng = np.random.default_rng([cfg.seed, 0x0B])
            if len(frames) > u["max_frames"]:
                frames = frames[np.sort(rng.choice(len(frames), u["max_frames"], replace=False))]
            ubm = train_diag_gmm(frames, u["components"], u["iters"], u["var_floor"], cfg.seed)
            if u["covariance_kind"] == "full":
                ubm = refine_full_gmm(ubm, frames, u["full_iters"], u["var_floor"])
            return [self._save(ubm, "ubm.lidk", key)], {}

        self._stage("ubm", key, compute)

    def _stage_stats(self):
        key = _digest(self.keys["ubm"])

        def compute(key):
            ubm = self._load("ubm.lidk")
            recs = self.usable()
            stats = _map(_stats_job, [(ubm, self.feature_path(r.utt_id)) for r in recs], self.jobs)
            return [self._save(StatsArchive([r.utt_id for r in recs], stats), "stats.lidk", key)], {}

        self._stage("stats", key, compute)

    def stats_by_id(self):
        arch = self._load("stats.lidk")
        return dict(zip(arch.utt_ids, arch.stats))

    def _stage_tv(self):
        cfg = self.cfg
        key = _digest(self.keys["stats"], cfg["tv"], cfg.seed)

        def compute(key):
            stats = self.stats_by_id()
            train = [stats[r.utt_id] for r in self.usable("train")]
            t = cfg["tv"]
            tv = train_tv(train, self._load("ubm.lidk"), t["rank"], t["iters"], cfg.seed, t["min_divergence"])
            return [self._save(tv, "tv.lidk", key)], {}

        self._stage("tv", key, compute)

    def _stage_ivectors(self):
        key = _digest(self.keys["tv"])

        def compute(key):
            arch = self._load("stats.lidk")
            W = extract_ivectors(self._load("tv.lidk"), arch.stats)
            return [self._save(IvectorArchive(arch.utt_ids, W), "ivectors.lidk", key)], {}

        self._stage("ivectors", key, compute)

    def ivectors_by_id(self):
        arch = self._load("ivectors.lidk")
        return dict(zip(arch.utt_ids, arch.vectors))

    def _stage_normalizer(self):
        cfg = self.cfg
        key = _digest(self.keys["ivectors"], cfg["normalizer"])

        def compute(key):
            W = self.ivectors_by_id()
            train = np.stack([W[r.utt_id] for r in self.usable("train")])
            n = cfg["normalizer"]
            norm = fit_normalizer(train, n["kind"], n["iterations"], n["length_norm"])
            return [self._save(norm, "normalizer.lidk", key)], {}

        self._stage("normalizer", key, compute)

    def normalized(self, recs):
        W = self.ivectors_by_id()
        return apply_normalizer(self._load("normalizer.lidk"), np.stack([W[r.utt_id] for r in recs]))

    def _stage_backends(self):
        cfg = self.cfg
        enabled = cfg["backends"]["enabled"]
        key = _digest(self.keys["normalizer"], cfg["backends"], cfg.seed)

        def compute(key):
            train = self.usable("train")
            X = self.normalized(train)
            y = self.labels(train)
            durations = np.array([r.duration_s for r in train])
            stats = self.stats_by_id() if "tandem_svm" in enabled else None
            ubm = self._load("ubm.lidk") if stats else None
            relevance = cfg["backends"]["tandem_relevance"]
            outputs = []
            for name in enabled:
                sv = _supervectors(ubm, [stats[r.utt_id] for r in train], relevance) if name == "tandem_svm" else None
                models = train_backend(name, cfg, X, y, [r.utt_id for r in train], durations, sv)
                for part, model in models.items():
                    outputs.append(self._save(model, f"backends/{name}/{part}.lidk", key))
                for split in ("dev", "eval"):
                    recs = self.usable(split)
                    if not recs:
                        raise DataError(f"no usable {split} utterances")
                    sv = (_supervectors(ubm, [stats[r.utt_id] for r in recs], relevance)
                          if name == "tandem_svm" else None)
                    s = backend_scores(name, models, self.normalized(recs), sv)
                    order = sorted(set(y.tolist()))
                    rel = f"scores/{name}.{split}.tsv"
                    os.makedirs(self.path("scores"), exist_ok=True)
                    write_scores_tsv(ScoreMatrix([r.utt_id for r in recs], order, s, "raw"), self.path(rel))
                    outputs.append(rel)
            return outputs, {"enabled": enabled}

        self._stage("backends", key, compute)

    def subsystem_scores(self, split):
        return [read_scores_tsv(self.path(f"scores/{name}.{split}.tsv")) for name in self.cfg["backends"]["enabled"]]

    def _stage_fusion(self):
        cfg = self.cfg
        key = _digest(self.keys["backends"], cfg["fusion"])

        def compute(key):
            dev = self.subsystem_scores("dev")
            labels = [self.by_id[u].language for u in dev[0].utt_ids]
            f = cfg["fusion"]
            model = fusion_train(dev, labels, f["folds"], f["l2"])
            fused = fusion_apply(model, self.subsystem_scores("eval"))
            write_scores_tsv(fused, self.path("scores/fused.eval.tsv"))
            return [self._save(model, "fusion.lidk", key), "scores/fused.eval.tsv"], {}

        self._stage("fusion", key, compute)

    def _stage_eval(self):
        key = _digest(self.keys["fusion"])

        def compute(key):
            fused = read_scores_tsv(self.path("scores/fused.eval.tsv"))
            report = evaluate_scores(fused, self.records, "eval")
            dev = self.subsystem_scores("dev")
            dev_labels = [self.by_id[u].language for u in dev[0].utt_ids]
            for name, d, e in zip(self.cfg["backends"]["enabled"], dev, self.subsystem_scores("eval")):
                single = fusion_train([d], dev_labels, self.cfg["fusion"]["folds"])
                sub = evaluate_scores(e, self.records, "eval", calibrated=fusion_apply(single, [e]))
                report.extra[f"backend.{name}.accuracy"] = sub.accuracy
                report.extra[f"backend.{name}.cavg"] = sub.cavg_overall
            model = self._load("fusion.lidk")
            report.extra["fusion.heldout_xent"] = model.mean_fold_xent
            write_report(report, self.path("report.txt"))
            return ["report.txt", "report.tsv"], {}

        self._stage("eval", key, compute)


def evaluate_scores(raw, records, split=None, calibrated=None):
    """Report for a raw score matrix against manifest labels.

    Accuracy is the argmax of ``raw``; costs use per-cluster LLRs of
    ``calibrated`` (default ``raw``).  Manifest utterances of ``split`` that
    have no scores are counted as skipped.
    """
    by_id = {r.utt_id: r for r in records}
    missing = [u for u in raw.utt_ids if u not in by_id]
    if missing:
        raise DataError(f"{len(missing)} scored utterances are not in the manifest, e.g. {missing[0]!r}")
    order = sorted(raw.language_order)
    raw = raw.reorder(order)
    calibrated = raw if calibrated is None else calibrated.reorder(order)
    labels = [by_id[u].language for u in raw.utt_ids]
    clusters = language_clusters(records)
    scored = set(raw.utt_ids)
    expected = [r.utt_id for r in records if split is None or r.split == split]
    skipped = [u for u in expected if u not in scored]
    extra = {"skipped_utterances": len(skipped)}
    if skipped:
        extra["skipped_ids"] = ",".join(skipped)
    return evaluate(raw, to_llr_per_cluster(calibrated, clusters), labels, clusters, extra)


def write_report(report, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_text())
    table = os.path.splitext(path)[0] + ".tsv"
    with open(table, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_table())


def load_system(cfg):
    out = cfg.output_dir
    def load(*parts):
        return load_model(os.path.join(out, *parts))
    backends = {}
    for name in cfg["backends"]["enabled"]:
        d = os.path.join(out, "backends", name)
        if not os.path.isdir(d):
            raise DataError(f"back-end {name!r} has no trained models under {out}; run the pipeline first")
        backends[name] = {f[:-5]: load("backends", name, f) for f in sorted(os.listdir(d)) if f.endswith(".lidk")}
    fusion = load("fusion.lidk")
    return System(load("ubm.lidk"), load("tv.lidk"), load("normalizer.lidk"), backends, fusion,
                  list(fusion.language_order))


def score_records(cfg, records, jobs=1, languages=None):
    """Apply the frozen trained system to ``records``; returns fused raw scores and skips.

    ``languages`` optionally requests a column order; it must name exactly
    the model's languages.
    """
    system = load_system(cfg)
    order = system.language_order
    if languages is not None and sorted(languages) != sorted(order):
        raise DataError(f"requested languages {sorted(languages)} differ from the model's {order}")
    unknown = sorted({r.language for r in records} - set(order))
    if unknown:
        raise DataError(f"manifest languages {unknown} are not known to the model (model order {order})")
    feats, skipped = compute_utterance_features(records, cfg.recipe(), jobs)
    recs = [r for r in records if r.utt_id in feats]
    if not recs:
        raise DataError("no utterance could be scored")
    stats = [accumulate_stats(system.ubm, feats[r.utt_id]) for r in recs]
    X = apply_normalizer(system.normalizer, extract_ivectors(system.tv, stats))
    relevance = cfg["backends"]["tandem_relevance"]
    subsystems = []
    for name in cfg["backends"]["enabled"]:
        sv = _supervectors(system.ubm, stats, relevance) if name == "tandem_svm" else None
        s = backend_scores(name, system.backends[name], X, sv)
        subsystems.append(ScoreMatrix([r.utt_id for r in recs], order, s, "raw"))
    fused = fusion_apply(system.fusion, subsystems)
    if languages is not None:
        fused = fused.reorder(list(languages))
    return fused, skipped
