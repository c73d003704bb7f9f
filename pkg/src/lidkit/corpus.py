"""Manifests, WAV I/O and the seeded synthetic corpus generator."""

import csv
import logging
import os
import wave
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import DataError, ManifestError, UnsupportedFormatError

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("utt_id", "path", "language", "cluster", "split", "duration")
SPLITS = ("train", "dev", "eval")
SAMPLE_RATES = (8000, 16000)
FIR_ORDER = 16
LANGUAGE_COLORING = 0.1


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    audio_path: str
    language: str
    cluster: str
    split: str
    duration_s: float


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("audio signal must be a non-empty 1-D array")
        if self.sample_rate_hz not in SAMPLE_RATES:
            raise UnsupportedFormatError(f"sample rate {self.sample_rate_hz} Hz not in {SAMPLE_RATES}")

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz


@dataclass
class SynthSpec:
    n_languages: int = 5
    languages_per_cluster: int = 3
    utterances_per_language: dict = field(
        default_factory=lambda: {"train": 60, "dev": 20, "eval": 20})
    duration_range_s: tuple = (3.0, 10.0)
    seed: int = 0
    sample_rate_hz: int = 8000

    def __post_init__(self):
        if self.n_languages < 1 or self.languages_per_cluster < 1:
            raise ValueError("language counts must be >= 1")
        for split, count in self.utterances_per_language.items():
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            if count < 1:
                raise ValueError(f"split {split!r} needs at least one utterance")
        lo, hi = self.duration_range_s
        if not 0 < lo <= hi:
            raise ValueError("duration range must be positive and ordered")
        if self.sample_rate_hz not in SAMPLE_RATES:
            raise ValueError(f"sample rate must be one of {SAMPLE_RATES}")


def validate_records(records):
    """Check id uniqueness and that each language belongs to a single cluster."""
    seen = set()
    cluster_of = {}
    for i, rec in enumerate(records):
        lineno = i + 2
        if rec.utt_id in seen:
            raise ManifestError(f"duplicate utt_id {rec.utt_id!r}", lineno)
        seen.add(rec.utt_id)
        prev = cluster_of.setdefault(rec.language, rec.cluster)
        if prev != rec.cluster:
            raise ManifestError(
                f"language {rec.language!r} assigned to clusters {prev!r} and {rec.cluster!r}", lineno)


def load_manifest(path):
    """Parse a tab-separated manifest into a list of ``UtteranceRecord``.

    Relative audio paths are resolved against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or tuple(lines[0].rstrip("\r").split("\t")) != MANIFEST_HEADER:
        raise ManifestError("bad header, expected " + "\\t".join(MANIFEST_HEADER), 1)
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_HEADER):
            raise ManifestError(f"expected {len(MANIFEST_HEADER)} fields, got {len(parts)}", lineno)
        utt_id, apath, lang, cluster, split, dur = parts
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}", lineno)
        try:
            duration = float(dur)
        except ValueError:
            raise ManifestError(f"duration {dur!r} is not a number", lineno) from None
        if not duration > 0:
            raise ManifestError("duration must be positive", lineno)
        if not utt_id or not lang or not cluster:
            raise ManifestError("empty utt_id, language or cluster", lineno)
        if not os.path.isabs(apath):
            apath = os.path.join(base, apath)
        records.append(UtteranceRecord(utt_id, apath, lang, cluster, split, duration))
    validate_records(records)
    return records


def write_manifest(records, path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            apath = r.audio_path
            if os.path.isabs(apath) and os.path.commonpath([apath, base]) == base:
                apath = os.path.relpath(apath, base)
            writer.writerow([r.utt_id, apath, r.language, r.cluster, r.split, repr(float(r.duration_s))])


def hash_bucket(utt_id, n):
    """Deterministic bucket in ``range(n)`` from a CRC32 of the utterance id."""
    return zlib.crc32(utt_id.encode("utf-8")) % n


def language_clusters(records):
    """Map language -> cluster from a manifest."""
    return {r.language: r.cluster for r in records}


def read_wav(path):
    """Read a mono PCM-16 WAV file into an ``AudioSignal`` scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise UnsupportedFormatError(f"{path}: {wf.getnchannels()} channels, only mono is supported")
            if wf.getsampwidth() != 2:
                raise UnsupportedFormatError(f"{path}: sample width {wf.getsampwidth()} bytes, need PCM-16")
            n = wf.getnframes()
            rate = wf.getframerate()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from None
    except EOFError:
        raise OSError(f"{path}: truncated WAV header") from None
    if len(raw) != 2 * n:
        raise OSError(f"{path}: data chunk truncated ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples, rate)


def write_wav(signal, path):
    """Write an ``AudioSignal`` as mono PCM-16 (values are clipped, then rounded)."""
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


def language_names(n_languages, languages_per_cluster):
    """Deterministic language -> cluster assignment used by the generator."""
    width = max(2, len(str(n_languages - 1)))
    return [(f"lang{i:0{width}d}", f"cluster{i // languages_per_cluster}")
            for i in range(n_languages)]


def language_filter(seed, lang_index, coloring=LANGUAGE_COLORING):
    """The fixed order-16 FIR filter that gives a synthetic language its timbre.

    Taps are a unit impulse plus ``coloring`` times seeded Gaussian draws,
    renormalised.  A mild colouring keeps frames of all languages
    overlapping (as phones of real languages do) while utterance-level
    spectral averages stay distinct.
    """
    rng = np.random.default_rng([seed, lang_index, 0xF17])
    taps = coloring * rng.standard_normal(FIR_ORDER + 1)
    taps[0] += 1.0
    return taps / np.linalg.norm(taps)


def generate_synthetic_corpus(spec, out_dir):
    """Write filtered-noise WAVs plus ``manifest.tsv`` into ``out_dir``.

    Output is a pure function of ``spec``: the same seed yields byte-identical
    files. Returns the manifest path.
    """
    try:
        os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    out_dir = os.path.abspath(out_dir)
    lo, hi = spec.duration_range_s
    sr = spec.sample_rate_hz
    records = []
    for li, (lang, cluster) in enumerate(language_names(spec.n_languages, spec.languages_per_cluster)):
        taps = language_filter(spec.seed, li)
        for si, split in enumerate(SPLITS):
            count = spec.utterances_per_language.get(split, 0)
            rng = np.random.default_rng([spec.seed, li, si])
            for j in range(count):
                n = int(round(rng.uniform(lo, hi) * sr))
                noise = rng.standard_normal(n + FIR_ORDER)
                x = lfilter(taps, [1.0], noise)[FIR_ORDER:]
                # fixed RMS keeps peaks well inside PCM range
                x *= 0.1 / np.sqrt(np.mean(x ** 2))
                utt_id = f"{lang}_{split}_{j:04d}"
                wav_path = os.path.join(out_dir, "wav", utt_id + ".wav")
                sig = AudioSignal(np.clip(x, -1.0, 32767 / 32768), sr)
                write_wav(sig, wav_path)
                records.append(UtteranceRecord(utt_id, wav_path, lang, cluster, split, n / sr))
    manifest = os.path.join(out_dir, "manifest.tsv")
    write_manifest(records, manifest)
    log.info("wrote %d synthetic utterances to %s", len(records), out_dir)
    return manifest
