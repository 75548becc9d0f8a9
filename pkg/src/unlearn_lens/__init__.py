"""unlearn-lens: a desk-scale laboratory for the reversibility of machine
unlearning, with representation-level diagnostics and regime classification."""

from .linalg import (
    EigenPair,
    LinalgError,
    as_matrix,
    center_columns,
    cosine,
    frobenius_norm,
    gram,
    sym_top_eigs,
)
from .model import (
    Batch,
    Corpus,
    CorpusSpec,
    ForwardTrace,
    ModelError,
    OptimizerState,
    TinyLM,
    adamw_step,
    evaluate,
    forward,
    init_model,
    loss_and_grads,
    make_holdout_corpus,
    make_synthetic_corpora,
    snapshot,
)
from .objectives import (
    UnlearnLossSpec,
    apply_mask,
    ga_gd_loss,
    ga_kl_loss,
    ga_loss,
    npo_kl_loss,
    npo_loss,
    rlabel_loss,
    saliency_mask,
)
from .diagnostics import (
    FisherSummary,
    LayerDiagnostics,
    MiaResult,
    PCAState,
    ProbeSet,
    build_probe_set,
    fisher_diagonal,
    linear_cka,
    locality_trial,
    mean_pca_distance,
    min_k_mia,
    pca_shift,
    pca_similarity,
    pca_state_from_activations,
    pca_states,
    perturbation_probe,
)
from .protocols import (
    ExperimentConfig,
    ForgettingRun,
    MetricRow,
    ModelConfig,
    ProbeConfig,
    RelearnConfig,
    TrainConfig,
    UnlearnConfig,
    partition_forget,
    relearn,
    run_experiment,
    train_base,
    unlearn_continual,
    unlearn_single,
)
from .regimes import RegimeThresholds, RegimeVerdict, classify, compute_deltas
from .dump import ActivationDump, DumpFormatError, read_dump, write_dump
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, config_from_dict, config_to_dict, load_config

__version__ = "0.1.0"
