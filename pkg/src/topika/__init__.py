"""Topic-model inference over a shared count substrate.

Six learners (ml, map, vb, cvb, cvb0, cgs) plus a token-parallel cvb0, all
reading and writing the same count matrices, with fixed-point hyperparameter
learning, validation grid search, and fold-in perplexity evaluation.
"""

from .batch_inference import (
    BatchConfig,
    batch_sweep,
    log_likelihood,
    map_log_joint,
    map_update,
    ml_update,
    vb_approx_update,
    vb_update,
)
from .collapsed_inference import (
    CollapsedConfig,
    CollapsedState,
    callen_oracle,
    cgs_step,
    collapsed_sweep,
    cvb0_step,
    cvb_step,
    init_collapsed_state,
    parallel_cvb0_sweep,
)
from .corpus import (
    Corpus,
    CorpusFormatError,
    FoldInSplit,
    SplitCorpus,
    dump_uci_bow,
    fold_in_split,
    load_uci_bow,
    split_corpus,
    synthetic_corpus,
)
from .evaluation import (
    ClassificationReport,
    PerplexityReport,
    classify_and_score,
    fold_in,
    heldout_perplexity,
    load_labels,
    perplexity,
    sweep_timing,
    timing_benchmark,
)
from .hyperopt import (
    PAPER_GRID,
    GridSpec,
    MinkaConfig,
    grid_search,
    iterate_minka,
    minka_update_alpha,
    minka_update_eta,
)
from .model_state import (
    CountMatrices,
    Hyperparams,
    Responsibilities,
    TopicAssignments,
    TopicEstimates,
    VarianceCounts,
    digamma,
    estimate_collapsed,
    estimate_map,
    estimate_vb_alternative,
    init_assignments,
    init_random,
    load_model,
    save_model,
)
from .training import ALGORITHMS, TrainResult, make_config, make_estimates, train_model

__version__ = "0.1.0"
