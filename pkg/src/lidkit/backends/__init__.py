"""Per-subsystem classifiers mapping i-vectors or supervectors to language scores."""

from .gaussian import GaussianBackend, gb_score, gb_train
from .mclr import MclrModel, detection_llr, mclr_apply, mclr_objective, mclr_train
from .pairnet import (PairNet, generate_pairs, pairnet_centroids, pairnet_loss_and_grad,
                      pairnet_score, pairnet_train)
from .plda import PldaEnrollment, PldaModel, plda_enroll, plda_score, plda_train
from .svm import SvmSet, svm_score, svm_train

__all__ = [
    "GaussianBackend", "gb_train", "gb_score",
    "MclrModel", "mclr_train", "mclr_apply", "mclr_objective", "detection_llr",
    "PldaModel", "PldaEnrollment", "plda_train", "plda_enroll", "plda_score",
    "SvmSet", "svm_train", "svm_score",
    "PairNet", "generate_pairs", "pairnet_train", "pairnet_loss_and_grad",
    "pairnet_centroids", "pairnet_score",
]
