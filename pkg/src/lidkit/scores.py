"""``ScoreMatrix``: utterances x languages scores shared by back-ends and fusion."""

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, DataError

SCORE_KINDS = ("loglik", "llr", "raw")


@dataclass
class ScoreMatrix:
    utt_ids: list
    language_order: list
    scores: np.ndarray
    score_kind: str = "raw"

    def __post_init__(self):
        self.utt_ids = list(self.utt_ids)
        self.language_order = list(self.language_order)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(len(self.utt_ids), -1)
        if self.scores.shape[1] != len(self.language_order):
            raise AlignmentError("score columns do not match language order")
        if len(set(self.language_order)) != len(self.language_order):
            raise DataError("duplicate language in language order")
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.score_kind!r}")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("score matrix contains NaN or Inf")

    @property
    def n_languages(self):
        return len(self.language_order)

    def __len__(self):
        return len(self.utt_ids)

    def reorder(self, language_order):
        """Columns permuted to ``language_order`` (same language set required)."""
        if sorted(language_order) != sorted(self.language_order):
            raise AlignmentError("language sets differ")
        idx = [self.language_order.index(lang) for lang in language_order]
        return ScoreMatrix(self.utt_ids, language_order, self.scores[:, idx], self.score_kind)

    def select(self, utt_ids):
        pos = {u: i for i, u in enumerate(self.utt_ids)}
        try:
            rows = [pos[u] for u in utt_ids]
        except KeyError as exc:
            raise AlignmentError(f"utterance {exc.args[0]!r} missing from score matrix") from None
        return ScoreMatrix(utt_ids, self.language_order, self.scores[rows], self.score_kind)


def label_indices(labels, language_order):
    pos = {lang: i for i, lang in enumerate(language_order)}
    try:
        return np.array([pos[lab] for lab in labels], dtype=int)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in language order") from None


def check_aligned(matrices):
    """All matrices must share utterance ids and language order."""
    if not matrices:
        raise AlignmentError("no score matrices given")
    ref = matrices[0]
    for m in matrices[1:]:
        if m.utt_ids != ref.utt_ids:
            raise AlignmentError("score matrices have different utterance ids")
        if m.language_order != ref.language_order:
            raise AlignmentError("score matrices have different language order")


def write_scores_tsv(scores, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["utt_id"] + scores.language_order) + "\n")
        for utt, row in zip(scores.utt_ids, scores.scores):
            fh.write("\t".join([utt] + ["%.17g" % v for v in row]) + "\n")


def read_scores_tsv(path, score_kind="raw"):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty score file")
    header = lines[0].split("\t")
    if header[0] != "utt_id":
        raise DataError(f"{path}: header must start with utt_id")
    utts, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(parts)} fields, expected {len(header)}")
        utts.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    data = np.array(rows, dtype=np.float64).reshape(len(utts), len(header) - 1)
    return ScoreMatrix(utts, header[1:], data, score_kind)
