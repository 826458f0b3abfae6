"""Representational synchrony toolkit for interacting language-model agents.

Measures how predictable one agent's per-layer hidden representations are
from its partner's, turn by turn, via ridge-fit affine maps evaluated by
test-set R^2 (SyncR2).  Ships the trace store, pair construction, solvers,
score aggregation with controls, a synthetic validation lab, distribution
decoding, correlation statistics, and a CLI.
"""

from .errors import ConfigError, DataError, NumericError, SyncError
from .pairsets import PairSpec, SplitPlan, build_pair_family, build_pairs
from .regression import AffineMap, MlpConfig, fit_mlp, fit_ridge, fit_ridge_family, r2_uniform
from .repstore import RepresentationTrace, load_corpus, read_trace, validate_corpus, write_trace
from .stats import correlate_by_family, load_score_table, partial_correlation, pearson
from .synchrony import (
    ScoreVariant,
    compute_heatmap,
    evaluate_partitioned,
    run_controls,
    sample_size_sweep,
    score_corpus,
    syncr2_directional,
    syncr2_symmetric,
)
from .synthlab import CouplingSpec, generate
from .decoding import fit_decoder, kl_divergence, run_decode, softmax_targets

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "ConfigError",
    "CouplingSpec",
    "DataError",
    "MlpConfig",
    "NumericError",
    "PairSpec",
    "RepresentationTrace",
    "ScoreVariant",
    "SplitPlan",
    "SyncError",
    "build_pair_family",
    "build_pairs",
    "compute_heatmap",
    "correlate_by_family",
    "evaluate_partitioned",
    "fit_decoder",
    "fit_mlp",
    "fit_ridge",
    "fit_ridge_family",
    "generate",
    "kl_divergence",
    "load_corpus",
    "load_score_table",
    "partial_correlation",
    "pearson",
    "r2_uniform",
    "read_trace",
    "run_controls",
    "run_decode",
    "sample_size_sweep",
    "score_corpus",
    "softmax_targets",
    "syncr2_directional",
    "syncr2_symmetric",
    "validate_corpus",
    "write_trace",
]
