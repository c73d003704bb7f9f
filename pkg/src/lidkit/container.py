"""Binary model container.

Layout: magic ``LIDK``, u32 format version, u32 header length, a UTF-8
JSON header, then the float64 little-endian payload.  The header names the
object kind, its scalar metadata and every array with its shape, in payload
order.  Loading rebuilds the object with bit-identical arrays.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .backends.gaussian import GaussianBackend
from .backends.mclr import MclrModel
from .backends.pairnet import PairNet
from .backends.plda import PldaEnrollment, PldaModel
from .backends.svm import SvmSet
from .errors import BadMagicError, ContainerError, TruncatedError, UnknownKindError, VersionError
from .fusion import FusionModel
from .gmm import BwStats, GmmModel
from .tv import Normalizer, TvModel

MAGIC = b"LIDK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class IvectorArchive:
    utt_ids: list
    vectors: np.ndarray


@dataclass
class StatsArchive:
    utt_ids: list
    stats: list   # BwStats per utterance


@dataclass
class Centroids:
    """Per-language unit-norm embedding centroids of a pair network."""
    language_order: list
    vectors: np.ndarray

    def as_dict(self):
        return dict(zip(self.language_order, self.vectors))


# Each kind: (type, encode(obj) -> (meta, [(name, array)]), decode(meta, arrays) -> obj)

def _gmm_parts(m, prefix=""):
    return [(prefix + "weights", m.weights), (prefix + "means", m.means),
            (prefix + "covariances", m.covariances)]


def _enc_gmm(m):
    return {"covariance_kind": m.covariance_kind}, _gmm_parts(m)


def _dec_gmm(meta, a):
    return GmmModel(a["weights"], a["means"], a["covariances"], meta["covariance_kind"])


def _enc_tv(m):
    return ({"ubm_covariance_kind": m.ubm.covariance_kind},
            [("T", m.T), ("bias", m.bias)] + _gmm_parts(m.ubm, "ubm."))


def _dec_tv(meta, a):
    ubm = GmmModel(a["ubm.weights"], a["ubm.means"], a["ubm.covariances"], meta["ubm_covariance_kind"])
    return TvModel(a["T"], ubm, a["bias"])


def _enc_norm(m):
    arrays = []
    for i, (mean, A) in enumerate(m.stages):
        arrays += [(f"stage{i}.mean", mean), (f"stage{i}.transform", A)]
    return {"kind": m.kind, "length_norm": m.length_norm, "stages": len(m.stages)}, arrays


def _dec_norm(meta, a):
    stages = [(a[f"stage{i}.mean"], a[f"stage{i}.transform"]) for i in range(meta["stages"])]
    return Normalizer(meta["kind"], stages, meta["length_norm"])


def _enc_gb(m):
    return ({"language_order": m.language_order, "gamma": m.gamma},
            [("means", m.means), ("sigma_global", m.sigma_global), ("sigma_smoothed", m.sigma_smoothed)])


def _dec_gb(meta, a):
    return GaussianBackend(meta["language_order"], a["means"], a["sigma_global"], a["sigma_smoothed"],
                           meta["gamma"])


def _enc_mclr(m):
    return {"language_order": m.language_order}, [("alpha", np.array(m.alpha)), ("beta", m.beta)]


def _dec_mclr(meta, a):
    return MclrModel(float(a["alpha"]), a["beta"], meta["language_order"])


def _enc_plda(m):
    return {}, [("mu", m.mu), ("F", m.F), ("sigma_w", m.sigma_w)]


def _dec_plda(meta, a):
    return PldaModel(a["mu"], a["F"], a["sigma_w"])


def _enc_enroll(m):
    return {"language_order": m.language_order}, [("counts", m.counts), ("sums", m.sums)]


def _dec_enroll(meta, a):
    return PldaEnrollment(meta["language_order"], a["counts"], a["sums"])


def _enc_svm(m):
    pairs = sorted(m.classifiers)
    arrays = []
    for i, key in enumerate(pairs):
        w, b = m.classifiers[key]
        arrays += [(f"w{i}", w), (f"b{i}", np.array(b))]
    meta = {"language_order": m.language_order, "pairs": [list(p) for p in pairs],
            "regularization": m.regularization, "mode": m.mode}
    return meta, arrays


def _dec_svm(meta, a):
    classifiers = {tuple(p): (a[f"w{i}"], float(a[f"b{i}"])) for i, p in enumerate(meta["pairs"])}
    return SvmSet(meta["language_order"], classifiers, meta["regularization"], meta["mode"])


def _enc_pairnet(m):
    arrays = []
    for i, (W, b) in enumerate(m.layers):
        arrays += [(f"W{i}", W), (f"b{i}", b)]
    if m.final_linear is not None:
        arrays.append(("E", m.final_linear))
    arrays += [("scale", m.scale), ("offset", m.offset), ("input_mean", m.input_mean),
               ("input_scale", m.input_scale)]
    return {"layers": len(m.layers), "final_linear": m.final_linear is not None}, arrays


def _dec_pairnet(meta, a):
    layers = [(a[f"W{i}"], a[f"b{i}"]) for i in range(meta["layers"])]
    return PairNet(layers, a["E"] if meta["final_linear"] else None, a["scale"], a["offset"],
                   a["input_mean"], a["input_scale"])


def _enc_centroids(m):
    return {"language_order": m.language_order}, [("vectors", m.vectors)]


def _dec_centroids(meta, a):
    return Centroids(meta["language_order"], a["vectors"])


def _enc_fusion(m):
    return ({"language_order": m.language_order, "fold_xent": list(m.fold_xent)},
            [("weights", m.weights), ("beta", m.beta)])


def _dec_fusion(meta, a):
    return FusionModel(a["weights"], a["beta"], meta["language_order"], meta["fold_xent"])


def _enc_ivectors(m):
    return {"utt_ids": list(m.utt_ids)}, [("vectors", np.asarray(m.vectors, dtype=np.float64))]


def _dec_ivectors(meta, a):
    return IvectorArchive(meta["utt_ids"], a["vectors"])


def _enc_stats(m):
    n = np.stack([s.n for s in m.stats]) if m.stats else np.zeros((0, 0))
    f = np.stack([s.f for s in m.stats]) if m.stats else np.zeros((0, 0, 0))
    totals = np.array([s.frames_total for s in m.stats], dtype=np.float64)
    return {"utt_ids": list(m.utt_ids)}, [("n", n), ("f", f), ("frames_total", totals)]


def _dec_stats(meta, a):
    stats = [BwStats(n, f, int(t)) for n, f, t in zip(a["n"], a["f"], a["frames_total"])]
    return StatsArchive(meta["utt_ids"], stats)


KINDS = {
    "gmm": (GmmModel, _enc_gmm, _dec_gmm),
    "tv": (TvModel, _enc_tv, _dec_tv),
    "normalizer": (Normalizer, _enc_norm, _dec_norm),
    "gaussian_backend": (GaussianBackend, _enc_gb, _dec_gb),
    "mclr": (MclrModel, _enc_mclr, _dec_mclr),
    "plda": (PldaModel, _enc_plda, _dec_plda),
    "plda_enrollment": (PldaEnrollment, _enc_enroll, _dec_enroll),
    "svm": (SvmSet, _enc_svm, _dec_svm),
    "pairnet": (PairNet, _enc_pairnet, _dec_pairnet),
    "centroids": (Centroids, _enc_centroids, _dec_centroids),
    "fusion": (FusionModel, _enc_fusion, _dec_fusion),
    "ivectors": (IvectorArchive, _enc_ivectors, _dec_ivectors),
    "stats": (StatsArchive, _enc_stats, _dec_stats),
}


def kind_of(obj):
    for kind, (cls, _, _) in KINDS.items():
        if type(obj) is cls:
            return kind
    raise UnknownKindError(f"no container kind for {type(obj).__name__}")


def save_model(obj, path, info=None):
    """Write ``obj`` to ``path``; ``info`` is extra JSON-able header metadata."""
    kind = kind_of(obj)
    meta, arrays = KINDS[kind][1](obj)
    arrays = [(name, np.asarray(arr, dtype="<f8", order="C")) for name, arr in arrays]
    header = {"kind": kind, "meta": meta, "info": info or {},
              "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays]}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        for _, arr in arrays:
            fh.write(arr.tobytes())


def read_header(path):
    """Header dict of a container, without decoding the payload."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < 4 or prefix[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a model container")
    if len(prefix) < _PREFIX.size:
        raise TruncatedError(f"{path}: truncated container prefix")
    _, version, head_len = _PREFIX.unpack(prefix)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported container version {version}")
    head = fh.read(head_len)
    if len(head) < head_len:
        raise TruncatedError(f"{path}: truncated header")
    try:
        return json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header ({exc})") from None


def load_model(path, expect=None):
    """Load a container; ``expect`` optionally names the required kind."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    kind = header.get("kind")
    if kind not in KINDS:
        raise UnknownKindError(f"{path}: unknown object kind {kind!r}")
    if expect is not None and kind != expect:
        raise ContainerError(f"{path}: holds {kind!r}, expected {expect!r}")
    arrays, offset = {}, 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise TruncatedError(f"{path}: payload shorter than declared arrays")
        arrays[spec["name"]] = np.frombuffer(payload, "<f8", nbytes // 8, offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise ContainerError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    return KINDS[kind][2](header["meta"], arrays)
