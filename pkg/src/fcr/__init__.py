"""Factorized causal representation learning for perturbation-response data.

A three-block variational model (covariate, interaction, treatment latents)
with adversarial independence regularization, plus the synthetic benchmark,
identifiability diagnostics and the quantitative evaluation suite.
"""
from .core import (
    Dataset,
    DiagGaussian,
    DimensionError,
    DomainError,
    LatentDims,
    LatentSample,
    cosine_similarity,
    cross_entropy,
    kl_diag_gaussian,
    reparameterize,
)
from .losses import LossWeights
from .model import FcrModel, ModelConfig, permute_within_condition
from .simulate import (
    RankReport,
    SimConfig,
    check_interaction_rank,
    generate_synthetic,
    rank_demo_config,
)
from .train import (
    SplitFractions,
    TrainConfig,
    grid_search,
    load_checkpoint,
    paper_default_grid,
    save_checkpoint,
    split_dataset,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DiagGaussian", "DimensionError", "DomainError", "LatentDims",
    "LatentSample", "cosine_similarity", "cross_entropy", "kl_diag_gaussian",
    "reparameterize", "LossWeights", "FcrModel", "ModelConfig",
    "permute_within_condition", "RankReport", "SimConfig",
    "check_interaction_rank", "generate_synthetic", "rank_demo_config",
    "SplitFractions", "TrainConfig", "grid_search", "load_checkpoint",
    "paper_default_grid", "save_checkpoint", "split_dataset", "train",
    "__version__",
]
