"""CNN filter pruning by filter attenuation, on a small numpy CNN engine."""
from .criteria import (
    ImportanceScores,
    filter_cosine,
    filter_l1,
    filter_l2,
    filter_std,
    normalized_scores,
    select_bottom_k,
)
from .data import Dataset, gen_synthetic, load_cifar10_binary, load_idx
from .masking import (
    PruneConfig,
    apply_attenuation,
    compute_mask_attenuate,
    compute_mask_hard,
    prune_zeroed,
    record_recovery,
    rollback_last_prune,
)
from .nn import Model, TrainConfig, build_desk_model, evaluate, load_checkpoint, save_checkpoint
from .reports import emit_reports
from .scheduler import (
    ExperimentLog,
    compact_model,
    next_layer_impact,
    run_attenuation_pruning,
    run_hard_pruning,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "ExperimentLog", "ImportanceScores", "Model", "PruneConfig", "TrainConfig",
    "apply_attenuation", "build_desk_model", "compact_model", "compute_mask_attenuate",
    "compute_mask_hard", "emit_reports", "evaluate", "filter_cosine", "filter_l1", "filter_l2",
    "filter_std", "gen_synthetic", "load_checkpoint", "load_cifar10_binary", "load_idx",
    "next_layer_impact", "normalized_scores", "prune_zeroed", "record_recovery",
    "rollback_last_prune", "run_attenuation_pruning", "run_hard_pruning", "save_checkpoint",
    "select_bottom_k",
]
