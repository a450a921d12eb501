"""Partial invariance for linear regression under concept drift."""

__version__ = "0.1.0"

from .envgen import (
    Dataset,
    EnvWeights,
    FeatureSpec,
    ScrambleMap,
    SpecError,
    SpuriousRule,
    gen_appendix_synth,
    gen_example1,
    homogeneous_spec,
    sample_dataset,
    sample_env_weights,
    sample_environments,
    scramble,
)
from .graphdist import (
    CommunityGraph,
    SpectralEmbedding,
    embedding_distance,
    laplacian,
    overlap_matrix,
    rank_environments,
    spectral_embedding,
)
from .learn import (
    DivergenceError,
    PenaltyForm,
    Predictor,
    RiskReport,
    TrainConfig,
    conditional_risk,
    evaluate,
    grad_objective,
    grad_penalty_closed_form,
    grad_penalty_empirical,
    mse_risk,
    objective,
    suppression_ratios,
    train,
)
from .oracle import (
    BoundReport,
    Partition,
    avg_distance_criterion,
    bound_report,
    build_partition,
    compute_gamma,
    exact_error_prob,
    l0_distance,
    oracle_indicator,
    partition_cardinality_mc,
    ratio_bound_p,
    required_envs,
)

__all__ = [
    "__version__",
    "Dataset",
    "EnvWeights",
    "FeatureSpec",
    "ScrambleMap",
    "SpecError",
    "SpuriousRule",
    "gen_appendix_synth",
    "gen_example1",
    "homogeneous_spec",
    "sample_dataset",
    "sample_env_weights",
    "sample_environments",
    "scramble",
    "CommunityGraph",
    "SpectralEmbedding",
    "embedding_distance",
    "laplacian",
    "overlap_matrix",
    "rank_environments",
    "spectral_embedding",
    "DivergenceError",
    "PenaltyForm",
    "Predictor",
    "RiskReport",
    "TrainConfig",
    "conditional_risk",
    "evaluate",
    "grad_objective",
    "grad_penalty_closed_form",
    "grad_penalty_empirical",
    "mse_risk",
    "objective",
    "suppression_ratios",
    "train",
    "BoundReport",
    "Partition",
    "avg_distance_criterion",
    "bound_report",
    "build_partition",
    "compute_gamma",
    "exact_error_prob",
    "l0_distance",
    "oracle_indicator",
    "partition_cardinality_mc",
    "ratio_bound_p",
    "required_envs",
]
