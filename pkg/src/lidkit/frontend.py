"""Spectral front-end: MFCC, deltas, shifted delta cepstra, VAD, CMVN, warping.

Every function is a pure per-utterance transform on numpy arrays wrapped in
``FeatureMatrix``.  Frame ``t`` covers samples ``[t*hop, t*hop + win)``.
"""

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct, rfft
from scipy.special import ndtri

from .errors import DataError, DimensionError, EmptyInputError, InsufficientDataError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FrameConfig:
    window_ms: float = 20.0
    hop_ms: float = 10.0
    window: str = "hamming"

    def __post_init__(self):
        if not self.window_ms >= self.hop_ms > 0:
            raise ValueError("need window_ms >= hop_ms > 0")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    def lengths(self, sample_rate):
        return (int(round(self.window_ms * sample_rate / 1000.0)),
                int(round(self.hop_ms * sample_rate / 1000.0)))


@dataclass(frozen=True)
class MfccConfig:
    n_filters: int = 24
    n_ceps: int = 7
    include_energy: bool = False
    preemphasis: float = 0.97

    def __post_init__(self):
        if not 0 < self.n_ceps <= self.n_filters:
            raise ValueError("need 0 < n_ceps <= n_filters")
        if not 0 <= self.preemphasis < 1:
            raise ValueError("preemphasis must lie in [0, 1)")


@dataclass(frozen=True)
class SdcConfig:
    N: int = 7
    d: int = 1
    P: int = 3
    k: int = 7

    def __post_init__(self):
        if min(self.N, self.d, self.P, self.k) < 1:
            raise ValueError("SDC parameters must all be positive")

    @property
    def dim(self):
        return self.N * self.k

    @property
    def context_frames(self):
        """Temporal half-span used for the speech-context rule."""
        return self.d + (self.k - 1) * self.P


@dataclass(frozen=True)
class VadConfig:
    mode: str = "energy_threshold"
    margin_db: float = 30.0
    context_ratio: float = 0.7

    def __post_init__(self):
        if self.mode not in ("energy_threshold", "snr_estimate"):
            raise ValueError(f"unknown VAD mode {self.mode!r}")
        if not 0 < self.context_ratio <= 1:
            raise ValueError("context_ratio must lie in (0, 1]")


@dataclass
class FeatureMatrix:
    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError("feature data must be frames x dims")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.data.shape[0],):
            raise DimensionError("mask length must equal frame count")
        if not np.all(np.isfinite(self.data)):
            raise DataError("feature matrix contains NaN or Inf")

    @classmethod
    def unmasked(cls, data):
        data = np.asarray(data, dtype=np.float64)
        return cls(data, np.ones(data.shape[0], dtype=bool))

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def speech(self):
        return self.data[self.mask]

    def with_mask(self, mask):
        return FeatureMatrix(self.data, np.asarray(mask, dtype=bool))


# -- framing and MFCC ---------------------------------------------------------

def frame_signal(samples, sample_rate, frame):
    win, hop = frame.lengths(sample_rate)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < win:
        raise EmptyInputError(f"signal of {samples.size} samples is shorter than one {win}-sample window")
    n_frames = (samples.size - win) // hop + 1
    return sliding_window_view(samples, win)[::hop][:n_frames]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters, n_fft, sample_rate):
    """Triangular HTK-Mel filters spanning 0 Hz to Nyquist, shape (n_filters, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (ctr - lo)
    falling = (hi - freqs) / (hi - ctr)
    return np.maximum(0.0, np.minimum(rising, falling))


def _power_frames(signal, frame, preemphasis):
    frames = frame_signal(signal.samples, signal.sample_rate_hz, frame)
    energy = np.sum(frames ** 2, axis=1)
    # per-frame pre-emphasis, first sample against itself
    emph = np.empty_like(frames)
    emph[:, 1:] = frames[:, 1:] - preemphasis * frames[:, :-1]
    emph[:, 0] = frames[:, 0] * (1.0 - preemphasis)
    win = frames.shape[1]
    n_fft = 1 << max(0, int(np.ceil(np.log2(win))))
    spec = rfft(emph * np.hamming(win), n=n_fft, axis=1)
    return np.abs(spec) ** 2, energy, n_fft


def filterbank_energies(signal, frame=FrameConfig(), mfcc=MfccConfig()):
    """Linear (not log) Mel filterbank outputs per frame."""
    power, _, n_fft = _power_frames(signal, frame, mfcc.preemphasis)
    return power @ mel_filterbank(mfcc.n_filters, n_fft, signal.sample_rate_hz).T


def frame_log_energy(signal, frame=FrameConfig()):
    frames = frame_signal(signal.samples, signal.sample_rate_hz, frame)
    return np.log(np.maximum(np.sum(frames ** 2, axis=1), LOG_FLOOR))


def extract_mfcc(signal, frame=FrameConfig(), mfcc=MfccConfig()):
    """MFCCs c0..c{n_ceps-1}; c0 becomes the frame log-energy if ``include_energy``."""
    power, energy, n_fft = _power_frames(signal, frame, mfcc.preemphasis)
    fbank = power @ mel_filterbank(mfcc.n_filters, n_fft, signal.sample_rate_hz).T
    ceps = dct(np.log(np.maximum(fbank, LOG_FLOOR)), type=2, norm="ortho", axis=1)[:, :mfcc.n_ceps]
    if mfcc.include_energy:
        ceps[:, 0] = np.log(np.maximum(energy, LOG_FLOOR))
    return FeatureMatrix.unmasked(ceps)


# -- temporal derivatives ------------------------------------------------------

def _edge_index(n, idx):
    return np.clip(idx, 0, n - 1)


def _deltas(x, window):
    n = x.shape[0]
    t = np.arange(n)
    num = np.zeros_like(x)
    for k in range(1, window + 1):
        num += k * (x[_edge_index(n, t + k)] - x[_edge_index(n, t - k)])
    return num / (2.0 * sum(k * k for k in range(1, window + 1)))


def append_deltas(feat, delta_window=2):
    """Concatenate regression deltas and delta-deltas (edge replication)."""
    if feat.n_frames == 0:
        raise EmptyInputError("no frames")
    d1 = _deltas(feat.data, delta_window)
    d2 = _deltas(d1, delta_window)
    return FeatureMatrix(np.hstack([feat.data, d1, d2]), feat.mask)


def build_sdc(cepstra, cfg=SdcConfig()):
    """Shifted delta cepstra: k stacked blocks c(t+jP+d) - c(t+jP-d), j=0..k-1.

    Uses the first ``cfg.N`` dims; indices outside the utterance are clamped to
    the first/last frame.  Output has ``N*k`` dims and keeps the input mask.
    """
    if cepstra.dim < cfg.N:
        raise DimensionError(f"SDC needs {cfg.N} cepstral dims, got {cepstra.dim}")
    c = cepstra.data[:, :cfg.N]
    n = c.shape[0]
    t = np.arange(n)[:, None]
    shift = (np.arange(cfg.k) * cfg.P)[None, :]
    plus = c[_edge_index(n, t + shift + cfg.d)]
    minus = c[_edge_index(n, t + shift - cfg.d)]
    return FeatureMatrix((plus - minus).reshape(n, cfg.N * cfg.k), cepstra.mask)


def sdc_mfcc(cepstra, cfg=SdcConfig()):
    """Base cepstra concatenated with their SDC (7-1-3-7 -> 56 dims)."""
    sdc = build_sdc(cepstra, cfg)
    return FeatureMatrix(np.hstack([cepstra.data[:, :cfg.N], sdc.data]), cepstra.mask)


# -- voice activity -------------------------------------------------------------

def _bimodal_split(x, iters=50):
    """Equal-posterior threshold of a two-component 1-D GMM fitted to ``x``.

    Returns +inf when ``x`` shows no spread, so nothing is selected by this rule.
    """
    x = np.asarray(x, dtype=np.float64)
    spread = np.std(x)
    if x.size < 2 or spread < 1e-6:
        return np.inf
    lo, hi = np.percentile(x, [25, 75])
    mu = np.array([lo, hi]) if hi > lo else np.array([x.min(), x.max()])
    var = np.full(2, spread ** 2)
    w = np.array([0.5, 0.5])
    for _ in range(iters):
        ll = -0.5 * (x[:, None] - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var) + np.log(w)
        ll -= ll.max(axis=1, keepdims=True)
        g = np.exp(ll)
        g /= g.sum(axis=1, keepdims=True)
        nk = g.sum(axis=0) + 1e-12
        w = nk / nk.sum()
        mu = (g * x[:, None]).sum(axis=0) / nk
        var = np.maximum((g * (x[:, None] - mu) ** 2).sum(axis=0) / nk, 1e-4 * spread ** 2)
    lo_i, hi_i = np.argsort(mu)
    # log w_i N(t; mu_i, v_i) equal for both components -> quadratic in t
    a = 0.5 / var[lo_i] - 0.5 / var[hi_i]
    b = mu[hi_i] / var[hi_i] - mu[lo_i] / var[lo_i]
    c = (0.5 * mu[lo_i] ** 2 / var[lo_i] - 0.5 * mu[hi_i] ** 2 / var[hi_i]
         + np.log(w[hi_i] / w[lo_i]) + 0.5 * np.log(var[lo_i] / var[hi_i]))
    if abs(a) < 1e-12:
        roots = np.array([-c / b]) if abs(b) > 1e-12 else np.array([])
    else:
        roots = np.roots([a, b, c])
        roots = roots[np.isreal(roots)].real
    between = [r for r in roots if mu[lo_i] <= r <= mu[hi_i]]
    if between:
        return float(between[0])
    return float(0.5 * (mu[lo_i] + mu[hi_i]))


def energy_vad(signal, frame=FrameConfig(), cfg=VadConfig()):
    """Boolean speech mask from frame log-energies (dB).

    ``energy_threshold``: a frame is speech if it lies within ``margin_db`` of
    the loudest frame or above the two-Gaussian split of the energy histogram.
    ``snr_estimate``: the noise floor is the mean energy of the quietest 10 %
    of frames; a frame is speech if it exceeds the floor by ``margin_db``.
    Frames at the log floor (digital silence) are never speech.
    """
    frames = frame_signal(signal.samples, signal.sample_rate_hz, frame)
    raw = np.sum(frames ** 2, axis=1)
    e_db = 10.0 * np.log10(np.maximum(raw, LOG_FLOOR))
    audible = raw > LOG_FLOOR
    if cfg.mode == "energy_threshold":
        speech = (e_db > e_db.max() - cfg.margin_db) | (e_db > _bimodal_split(e_db))
    else:
        n_low = max(1, int(np.ceil(0.1 * e_db.size)))
        floor = np.mean(np.sort(e_db)[:n_low])
        speech = e_db - floor > cfg.margin_db
    return speech & audible


def context_mask(mask, context_frames, ratio):
    """Keep frame t iff at least ``ratio`` of mask[t-c .. t+c] (clipped) is speech."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    mask = np.asarray(mask, dtype=bool)
    n = mask.size
    csum = np.concatenate([[0], np.cumsum(mask)])
    t = np.arange(n)
    lo = np.clip(t - context_frames, 0, n)
    hi = np.clip(t + context_frames + 1, 0, n)
    count = csum[hi] - csum[lo]
    # tolerance guards ratio*width products like 0.7*10
    return count >= ratio * (hi - lo) - 1e-9


# -- normalisation ---------------------------------------------------------------

def _speech_windows(n_speech, half):
    i = np.arange(n_speech)
    return np.clip(i - half, 0, n_speech), np.clip(i + half + 1, 0, n_speech)


def cmvn(feat, scope="per_utterance", window_s=3.0, hop_ms=10.0, variance=True):
    """Mean (and variance) normalisation with statistics from speech frames only.

    ``sliding`` uses a centred window of ``window_s`` seconds over the sequence
    of speech frames; non-speech frames borrow the window of the next speech
    frame.  All frames are transformed.
    """
    x = feat.speech()
    if x.shape[0] < 2:
        raise InsufficientDataError("CMVN needs at least 2 speech frames")
    if scope == "per_utterance":
        mu = x.mean(axis=0)
        out = feat.data - mu
        if variance:
            out = out / np.sqrt(np.maximum(x.var(axis=0), LOG_FLOOR))
        return FeatureMatrix(out, feat.mask)
    if scope != "sliding":
        raise ValueError(f"unknown CMVN scope {scope!r}")
    n = x.shape[0]
    half = int(round(window_s * 1000.0 / hop_ms)) // 2
    lo, hi = _speech_windows(n, half)
    c1 = np.vstack([np.zeros(x.shape[1]), np.cumsum(x, axis=0)])
    c2 = np.vstack([np.zeros(x.shape[1]), np.cumsum(x ** 2, axis=0)])
    cnt = (hi - lo)[:, None]
    mu = (c1[hi] - c1[lo]) / cnt
    var = np.maximum((c2[hi] - c2[lo]) / cnt - mu ** 2, LOG_FLOOR)
    # each frame uses the statistics of the nearest speech frame at or after it
    pos = np.minimum(np.searchsorted(np.flatnonzero(feat.mask), np.arange(feat.n_frames)), n - 1)
    out = feat.data - mu[pos]
    if variance:
        out = out / np.sqrt(var[pos])
    return FeatureMatrix(out, feat.mask)


def feature_warp(feat, window_frames=301):
    """Rank-based Gaussianisation of each dim over a sliding speech-frame window.

    A speech value with rank r (1-based) among the w values of its clipped
    window maps to ``ndtri((r - 0.5) / w)``.  Non-speech frames are untouched.
    """
    if window_frames < 3 or window_frames % 2 == 0:
        raise ValueError("window_frames must be odd and >= 3")
    x = feat.speech()
    if x.shape[0] == 0:
        raise EmptyInputError("no speech frames to warp")
    n, dims = x.shape
    half = window_frames // 2
    padded = np.full((n + 2 * half, dims), np.nan)
    padded[half:half + n] = x
    win = sliding_window_view(padded, window_frames, axis=0)  # (n, dims, w)
    # NaN padding compares False, so clipped windows count only real frames
    rank = np.sum(win < x[:, :, None], axis=2) + 1
    lo, hi = _speech_windows(n, half)
    width = (hi - lo)[:, None]
    out = feat.data.copy()
    out[feat.mask] = ndtri((rank - 0.5) / width)
    return FeatureMatrix(out, feat.mask)


# -- debug dump ------------------------------------------------------------------

_DUMP_MAGIC = b"LIDF"
_DUMP_VERSION = 1


def write_feature_dump(feat, path):
    n, d = feat.data.shape
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC + struct.pack("<III", _DUMP_VERSION, n, d))
        fh.write(feat.data.astype("<f4").tobytes())
        fh.write(feat.mask.astype(np.uint8).tobytes())


def read_feature_dump(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _DUMP_MAGIC:
        raise DataError(f"{path}: not a feature dump")
    version, n, d = struct.unpack("<III", blob[4:16])
    if version != _DUMP_VERSION:
        raise DataError(f"{path}: unsupported dump version {version}")
    body = 16 + 4 * n * d
    if len(blob) < body + n:
        raise OSError(f"{path}: truncated feature dump")
    data = np.frombuffer(blob[16:body], dtype="<f4").reshape(n, d).astype(np.float64)
    mask = np.frombuffer(blob[body:body + n], dtype=np.uint8).astype(bool)
    return FeatureMatrix(data, mask)


# -- recipes ----------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureRecipe:
    """A complete front-end chain.

    ``kind="sdc"`` gives N base cepstra plus SDC; ``kind="mfcc_deltas"`` gives
    cepstra with deltas and delta-deltas.  ``cmvn`` is one of ``none``,
    ``per_utterance``, ``sliding``.
    """
    kind: str = "sdc"
    frame: FrameConfig = FrameConfig()
    mfcc: MfccConfig = MfccConfig()
    sdc: SdcConfig = SdcConfig()
    vad: VadConfig = VadConfig()
    delta_window: int = 2
    cmvn: str = "per_utterance"
    cmvn_window_s: float = 3.0
    cmvn_variance: bool = True
    warp: bool = True
    warp_window: int = 301

    @property
    def dim(self):
        if self.kind == "sdc":
            return self.sdc.N + self.sdc.dim
        return 3 * self.mfcc.n_ceps


def compute_features(signal, recipe=FeatureRecipe()):
    """Run a recipe end to end; the result keeps every frame plus its speech mask."""
    ceps = extract_mfcc(signal, recipe.frame, recipe.mfcc)
    vad = energy_vad(signal, recipe.frame, recipe.vad)
    if recipe.kind == "sdc":
        feat = sdc_mfcc(ceps, recipe.sdc)
        mask = vad & context_mask(vad, recipe.sdc.context_frames, recipe.vad.context_ratio)
    elif recipe.kind == "mfcc_deltas":
        feat = append_deltas(ceps, recipe.delta_window)
        mask = vad
    else:
        raise ValueError(f"unknown feature recipe {recipe.kind!r}")
    feat = feat.with_mask(mask)
    if feat.mask.sum() < 2:
        raise InsufficientDataError("fewer than 2 speech frames after VAD")
    if recipe.cmvn != "none":
        feat = cmvn(feat, recipe.cmvn, recipe.cmvn_window_s, recipe.frame.hop_ms, recipe.cmvn_variance)
    if recipe.warp:
        feat = feature_warp(feat, recipe.warp_window)
    return feat
