import os
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidkit.corpus import (AudioSignal, SynthSpec, UtteranceRecord, generate_synthetic_corpus, hash_bucket,
                           load_manifest, read_wav, write_manifest, write_wav)
from lidkit.errors import DataError, ManifestError, UnsupportedFormatError

HEADER = "utt_id\tpath\tlanguage\tcluster\tsplit\tduration\n"


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_manifest_three_lines_in_order(tmp_path):
    body = ("b\tb.wav\tx\tc1\ttrain\t1.5\n"
            "a\ta.wav\ty\tc1\tdev\t2\n"
            "c\t/abs/c.wav\tx\tc1\teval\t3.25\n")
    recs = load_manifest(_write(tmp_path / "m.tsv", HEADER + body))
    assert [r.utt_id for r in recs] == ["b", "a", "c"]
    assert recs[0].audio_path == os.path.join(str(tmp_path), "b.wav")
    assert recs[2].audio_path == "/abs/c.wav"
    assert recs[1].split == "dev" and recs[2].duration_s == 3.25


def test_manifest_short_line_names_line_2(tmp_path):
    path = _write(tmp_path / "m.tsv", HEADER + "a\ta.wav\tx\tc1\ttrain\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(path)


def test_manifest_language_in_two_clusters(tmp_path):
    body = "a\ta.wav\tx\tc1\ttrain\t1\nb\tb.wav\tx\tc2\ttrain\t1\n"
    with pytest.raises(ManifestError, match="line 3.*clusters"):
        load_manifest(_write(tmp_path / "m.tsv", HEADER + body))


@pytest.mark.parametrize("line, what", [
    ("a\ta.wav\tx\tc1\ttrain\t0\n", "positive"),
    ("a\ta.wav\tx\tc1\tholdout\t1\n", "split"),
    ("a\ta.wav\tx\tc1\ttrain\tlong\n", "number"),
])
def test_manifest_bad_fields(tmp_path, line, what):
    with pytest.raises(ManifestError, match=what):
        load_manifest(_write(tmp_path / "m.tsv", HEADER + line))


def test_manifest_duplicate_id(tmp_path):
    body = "a\ta.wav\tx\tc1\ttrain\t1\na\tb.wav\tx\tc1\ttrain\t1\n"
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(_write(tmp_path / "m.tsv", HEADER + body))


def test_manifest_round_trip(tmp_path):
    recs = [UtteranceRecord("u1", str(tmp_path / "w" / "u1.wav"), "en", "g", "train", 1.25),
            UtteranceRecord("u2", "/elsewhere/u2.wav", "fr", "g", "eval", 0.5)]
    path = tmp_path / "m.tsv"
    write_manifest(recs, path)
    assert "w/u1.wav" in path.read_text()
    assert load_manifest(path) == recs


def test_read_wav_zeros(tmp_path):
    write_wav(AudioSignal(np.zeros(8000), 8000), tmp_path / "z.wav")
    sig = read_wav(tmp_path / "z.wav")
    assert sig.sample_rate_hz == 8000
    np.testing.assert_array_equal(sig.samples, np.zeros(8000))


def _raw_wav(path, frames, channels=1, width=2, rate=8000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(frames)


def test_read_wav_half_scale(tmp_path):
    _raw_wav(tmp_path / "h.wav", np.array([16384, -32768], dtype="<i2").tobytes())
    np.testing.assert_array_equal(read_wav(tmp_path / "h.wav").samples, [0.5, -1.0])


def test_read_wav_rejects_stereo(tmp_path):
    _raw_wav(tmp_path / "s.wav", np.zeros(20, dtype="<i2").tobytes(), channels=2)
    with pytest.raises(UnsupportedFormatError, match="mono"):
        read_wav(tmp_path / "s.wav")


def test_read_wav_rejects_8bit(tmp_path):
    _raw_wav(tmp_path / "b.wav", bytes(20), width=1)
    with pytest.raises(UnsupportedFormatError):
        read_wav(tmp_path / "b.wav")


def test_read_wav_truncated_data(tmp_path):
    path = tmp_path / "t.wav"
    write_wav(AudioSignal(np.full(1000, 0.25), 8000), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-500])
    with pytest.raises(OSError, match="truncated"):
        read_wav(path)


def test_audio_signal_invariants():
    with pytest.raises(DataError):
        AudioSignal(np.zeros(0), 8000)
    with pytest.raises(UnsupportedFormatError):
        AudioSignal(np.zeros(10), 44100)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1.0, 32767 / 32768), min_size=1, max_size=400))
def test_wav_round_trip_within_one_step(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("wav") / "x.wav"
    x = np.array(values)
    write_wav(AudioSignal(x, 16000), path)
    back = read_wav(path)
    assert back.sample_rate_hz == 16000
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768


def _spec(**kw):
    base = dict(n_languages=5, languages_per_cluster=3, utterances_per_language={"train": 10},
                duration_range_s=(0.5, 1.0), seed=7)
    base.update(kw)
    return SynthSpec(**base)


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_synthetic_corpus_is_deterministic(tmp_path):
    generate_synthetic_corpus(_spec(), tmp_path / "a")
    generate_synthetic_corpus(_spec(), tmp_path / "b")
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert len(a) == 51 and a == b


def test_synthetic_corpus_seed_changes_audio(tmp_path):
    generate_synthetic_corpus(_spec(), tmp_path / "a")
    generate_synthetic_corpus(_spec(seed=8), tmp_path / "b")
    assert _tree_bytes(tmp_path / "a")["wav/lang00_train_0000.wav"] != \
        _tree_bytes(tmp_path / "b")["wav/lang00_train_0000.wav"]


def test_synthetic_corpus_clusters_and_counts(tmp_path):
    spec = _spec(n_languages=4, languages_per_cluster=2,
                 utterances_per_language={"train": 3, "dev": 2, "eval": 1})
    recs = load_manifest(generate_synthetic_corpus(spec, tmp_path / "c"))
    assert len({r.language for r in recs}) == 4
    assert len({r.cluster for r in recs}) == 2
    for lang in {r.language for r in recs}:
        for split, n in spec.utterances_per_language.items():
            assert sum(r.language == lang and r.split == split for r in recs) == n
    for r in recs:
        sig = read_wav(r.audio_path)
        assert 0.5 <= sig.duration_s <= 1.0
        assert abs(sig.duration_s - r.duration_s) < 1e-12


def test_synthetic_languages_have_different_spectra(tmp_path):
    spec = _spec(n_languages=2, languages_per_cluster=2, utterances_per_language={"train": 4},
                 duration_range_s=(2.0, 2.0))
    recs = load_manifest(generate_synthetic_corpus(spec, tmp_path / "c"))

    def periodograms(lang):
        segs = []
        for r in recs:
            if r.language == lang:
                x = read_wav(r.audio_path).samples
                segs.extend(x[i:i + 256] for i in range(0, len(x) - 256, 256))
        return np.array([np.abs(np.fft.rfft(s)) ** 2 / 256 for s in segs])

    pa, pb = periodograms("lang00"), periodograms("lang01")
    a, b = pa.mean(axis=0), pb.mean(axis=0)
    # split-half difference measures the estimation noise of one average
    noise = np.linalg.norm(pa[::2].mean(axis=0) - pa[1::2].mean(axis=0))
    assert np.linalg.norm(a - b) > 0
    assert np.linalg.norm(a - b) > 3 * noise


def test_synthspec_validation():
    with pytest.raises(ValueError):
        SynthSpec(duration_range_s=(2.0, 1.0))
    with pytest.raises(ValueError):
        SynthSpec(utterances_per_language={"train": 0})
    with pytest.raises(ValueError):
        SynthSpec(n_languages=0)


def test_hash_bucket_is_stable():
    import zlib
    assert hash_bucket("abc", 3) == zlib.crc32(b"abc") % 3
    assert {hash_bucket(f"u{i}", 2) for i in range(50)} == {0, 1}
