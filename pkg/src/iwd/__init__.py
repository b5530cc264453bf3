"""Influence-weighted dataset distillation at desk scale."""

__version__ = "0.1.0"

from .data import (
    NoiseSpec,
    SyntheticSet,
    WeightedDataset,
    flip_labels,
    gen_gaussian_mixture,
    gen_two_moons,
    init_synthetic,
    load_idx_pair,
    load_synthetic,
    save_synthetic,
)
from .engine import (
    ABLATION_MODES,
    DistillConfig,
    EvalConfig,
    RunReport,
    distill,
    evaluate,
    run_ablation,
    tau_sweep,
)
from .errors import ContractError, FormatError, NumericalError, SolverError
from .influence import (
    HvpSolverConfig,
    InfluenceRecord,
    MetricSpec,
    TrainerConfig,
    classical_influence,
    distill_influence_explicit,
    distill_influence_full,
    loo_all,
    loo_effect,
    score_all,
)
from .matching import DiscrepancyKind, StatisticKind, TrajectoryConfig
from .models import ArchDescriptor, InitDistribution, SgdConfig
from .runconfig import ExperimentConfig, load_config
from .weighting import WeightPolicy, softmax_weights, weights_from_influence

__all__ = [
    "__version__",
    "ABLATION_MODES",
    "ArchDescriptor",
    "ContractError",
    "DiscrepancyKind",
    "DistillConfig",
    "EvalConfig",
    "ExperimentConfig",
    "FormatError",
    "HvpSolverConfig",
    "InfluenceRecord",
    "InitDistribution",
    "MetricSpec",
    "NoiseSpec",
    "NumericalError",
    "RunReport",
    "SgdConfig",
    "SolverError",
    "StatisticKind",
    "SyntheticSet",
    "TrainerConfig",
    "TrajectoryConfig",
    "WeightPolicy",
    "WeightedDataset",
    "classical_influence",
    "distill",
    "distill_influence_explicit",
    "distill_influence_full",
    "evaluate",
    "flip_labels",
    "gen_gaussian_mixture",
    "gen_two_moons",
    "init_synthetic",
    "load_config",
    "load_idx_pair",
    "load_synthetic",
    "loo_all",
    "loo_effect",
    "run_ablation",
    "save_synthetic",
    "score_all",
    "softmax_weights",
    "tau_sweep",
    "weights_from_influence",
]
