"""Spoken language identification: SDC-MFCC front-end, GMM-UBM, i-vectors,
several back-end classifiers and multiclass logistic-regression fusion."""

from .config import ExperimentConfig, load_config, parse_config
from .container import load_model, save_model
from .corpus import (AudioSignal, SynthSpec, UtteranceRecord, generate_synthetic_corpus, load_manifest,
                     read_wav, write_wav)
from .errors import (ConfigError, ContainerError, DataError, LidError, LidWarning, NumericError)
from .frontend import FeatureMatrix, FeatureRecipe, build_sdc, compute_features, extract_mfcc
from .fusion import (EvalReport, FusionModel, compute_cavg, compute_cllr, fusion_apply, fusion_train,
                     to_llr_per_cluster)
from .gmm import BwStats, GmmModel, accumulate_stats, map_supervector, refine_full_gmm, train_diag_gmm
from .scores import ScoreMatrix, read_scores_tsv, write_scores_tsv
from .tv import TvModel, apply_normalizer, extract_ivector, fit_normalizer, train_tv

__version__ = "0.1.0"
