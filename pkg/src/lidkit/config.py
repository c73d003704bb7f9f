"""Experiment configuration read from an INI file.

Sections mirror the pipeline stages: ``experiment``, ``frontend``, ``ubm``,
``tv``, ``normalizer``, ``backends``, ``fusion`` (and ``synth`` for the
corpus generator).  Relative paths are resolved against the config file's
directory.  Unknown keys are rejected so that typos fail loudly.
"""

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .frontend import FeatureRecipe, FrameConfig, MfccConfig, SdcConfig, VadConfig
from .tv import PRESETS

BACKEND_NAMES = ("gb_mclr", "plda", "svm", "pairnet", "tandem_svm")

# key -> (type, default) per section
SCHEMA = {
    "experiment": {
        "manifest": (str, "manifest.tsv"),
        "output_dir": (str, "out"),
        "seed": (int, 0),
        "preset": (str, "none"),
    },
    "synth": {
        "n_languages": (int, 5),
        "languages_per_cluster": (int, 3),
        "train": (int, 60),
        "dev": (int, 20),
        "eval": (int, 20),
        "min_duration_s": (float, 3.0),
        "max_duration_s": (float, 10.0),
        "sample_rate_hz": (int, 8000),
        "out_dir": (str, "corpus"),
    },
    "frontend": {
        "recipe": (str, "sdc"),
        "n_filters": (int, 24),
        "n_ceps": (int, 7),
        "include_energy": (bool, False),
        "preemphasis": (float, 0.97),
        "window_ms": (float, 20.0),
        "hop_ms": (float, 10.0),
        "sdc": (str, "7-1-3-7"),
        "delta_window": (int, 2),
        "vad_mode": (str, "energy_threshold"),
        "margin_db": (float, 30.0),
        "context_ratio": (float, 0.7),
        "cmvn": (str, "per_utterance"),
        "cmvn_window_s": (float, 3.0),
        "warp": (bool, True),
        "warp_window": (int, 301),
    },
    "ubm": {
        "components": (int, 64),
        "covariance_kind": (str, "diagonal"),
        "iters": (int, 8),
        "full_iters": (int, 3),
        "var_floor": (float, 1e-3),
        "max_frames": (int, 60000),
    },
    "tv": {
        "rank": (int, 50),
        "iters": (int, 5),
        "min_divergence": (bool, True),
    },
    "normalizer": {
        "kind": (str, "whiten"),
        "iterations": (int, 1),
        "length_norm": (bool, True),
    },
    "backends": {
        "enabled": (list, ["gb_mclr", "plda", "svm", "pairnet"]),
        "gb_gamma": (float, 0.1),
        "plda_rank": (int, 20),
        "plda_iters": (int, 10),
        "min_duration_s": (float, 1.0),
        "svm_c": (float, 1.0),
        "svm_epochs": (int, 200),
        "pairnet_hidden": (list, ["256"]),
        "pairnet_embedding": (int, 64),
        "pairnet_epochs": (int, 15),
        "pairnet_lr": (float, 0.5),
        "pairnet_rounds": (int, 20),
        "tandem_relevance": (float, 16.0),
    },
    "fusion": {
        "folds": (int, 2),
        "l2": (float, 0.0),
    },
}

_PATH_KEYS = {("experiment", "manifest"), ("experiment", "output_dir"), ("synth", "out_dir")}


def _parse_value(section, key, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is list:
            return [item.strip() for item in raw.replace(",", " ").split() if item.strip()]
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def _preset_values(name):
    if name == "none":
        return {}
    if name not in PRESETS:
        raise ConfigError(f"[experiment] preset: unknown preset {name!r}, choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    K, R = p.sizes("desk")
    return {
        "frontend": {"cmvn": p.cmvn},
        "ubm": {"components": K, "covariance_kind": p.covariance_kind},
        "tv": {"rank": R},
        "normalizer": {"kind": p.normalizer, "iterations": p.efr_iterations, "length_norm": p.length_norm},
    }


@dataclass
class ExperimentConfig:
    """Typed view of every section, plus the resolved raw values used for hashing."""
    values: dict
    path: str = None
    hashes: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.values[section]

    @property
    def manifest(self):
        return self.values["experiment"]["manifest"]

    @property
    def output_dir(self):
        return self.values["experiment"]["output_dir"]

    @property
    def seed(self):
        return self.values["experiment"]["seed"]

    def section_hash(self, *sections):
        """Stable digest of the named sections' resolved values."""
        blob = json.dumps({s: self.values[s] for s in sections}, sort_keys=True)
        return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:16]

    def recipe(self):
        fe = self.values["frontend"]
        try:
            N, d, P, k = (int(v) for v in fe["sdc"].split("-"))
        except ValueError:
            raise ConfigError(f"[frontend] sdc: expected N-d-P-k, got {fe['sdc']!r}") from None
        try:
            return FeatureRecipe(
                kind=fe["recipe"],
                frame=FrameConfig(fe["window_ms"], fe["hop_ms"]),
                mfcc=MfccConfig(fe["n_filters"], fe["n_ceps"], fe["include_energy"], fe["preemphasis"]),
                sdc=SdcConfig(N, d, P, k),
                vad=VadConfig(fe["vad_mode"], fe["margin_db"], fe["context_ratio"]),
                delta_window=fe["delta_window"],
                cmvn=fe["cmvn"],
                cmvn_window_s=fe["cmvn_window_s"],
                warp=fe["warp"],
                warp_window=fe["warp_window"],
            )
        except ValueError as exc:
            raise ConfigError(f"[frontend] {exc}") from None


def _validate(values):
    fe = values["frontend"]
    if fe["recipe"] not in ("sdc", "mfcc_deltas"):
        raise ConfigError(f"[frontend] recipe: unknown recipe {fe['recipe']!r}")
    if fe["cmvn"] not in ("none", "per_utterance", "sliding"):
        raise ConfigError(f"[frontend] cmvn: unknown scope {fe['cmvn']!r}")
    if values["ubm"]["covariance_kind"] not in ("diagonal", "full"):
        raise ConfigError("[ubm] covariance_kind must be diagonal or full")
    if values["ubm"]["components"] < 1 or values["tv"]["rank"] < 1:
        raise ConfigError("[ubm] components and [tv] rank must be positive")
    if values["normalizer"]["kind"] not in ("whiten", "efr"):
        raise ConfigError("[normalizer] kind must be whiten or efr")
    enabled = values["backends"]["enabled"]
    if not enabled:
        raise ConfigError("[backends] enabled: at least one back-end must be enabled")
    unknown = [b for b in enabled if b not in BACKEND_NAMES]
    if unknown:
        raise ConfigError(f"[backends] enabled: unknown back-end(s) {unknown}, choose from {BACKEND_NAMES}")
    if len(set(enabled)) != len(enabled):
        raise ConfigError("[backends] enabled: duplicate back-end")
    try:
        hidden = [int(h) for h in values["backends"]["pairnet_hidden"]]
    except ValueError:
        raise ConfigError("[backends] pairnet_hidden: expected integers") from None
    if not hidden or min(hidden) < 1 or values["backends"]["pairnet_embedding"] < 1:
        raise ConfigError("[backends] pairnet layer sizes must be positive")
    if values["fusion"]["folds"] < 2:
        raise ConfigError("[fusion] folds must be at least 2")


def parse_config(text, base_dir=".", path=None):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    given = {s: dict(parser[s]) for s in parser.sections()}
    preset = given.get("experiment", {}).get("preset", "none").strip()
    from_preset = _preset_values(preset)
    values = {}
    for section, keys in SCHEMA.items():
        raw = given.get(section, {})
        unknown = sorted(set(raw) - set(keys))
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s) {unknown}")
        sec = {}
        for key, (kind, default) in keys.items():
            if key in raw:
                sec[key] = _parse_value(section, key, raw[key], kind)
            else:
                sec[key] = from_preset.get(section, {}).get(key, default)
            if (section, key) in _PATH_KEYS:
                sec[key] = os.path.normpath(os.path.join(base_dir, sec[key]))
        values[section] = sec
    _validate(values)
    return ExperimentConfig(values, path)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)), path)


def default_config_text():
    """A complete desk-scale configuration with every key at its default."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (kind, default) in keys.items():
            if kind is list:
                default = ", ".join(default)
            elif kind is bool:
                default = str(default).lower()
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)
