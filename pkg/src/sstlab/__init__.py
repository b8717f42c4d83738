"""Self-explaining classifiers that emit concise sufficient-reason subsets.

A feed-forward network with a shared trunk and two heads is trained with a
dual propagation: the clean pass drives the usual prediction loss plus an L1
cardinality penalty on the explanation scores, and a second pass on a
masked input drives a faithfulness loss that keeps the thresholded subset
sufficient for the prediction.  Baseline, probabilistic, and robust masking
variants cover the matching notions of sufficiency, with exact brute-force
and greedy reference explainers for desk-scale verification.
"""

from .data import Dataset, SyntheticSpec, gen_synthetic, load_idx, split
from .evaluation import (
    MetricsReport,
    eval_accuracy,
    eval_cross,
    eval_faithfulness,
    eval_size_and_time,
    metrics_report,
)
from .masking import (
    BaselineMasking,
    MaskingStrategy,
    ProbabilisticMasking,
    RobustMasking,
    baseline_mask,
    probabilistic_mask,
    robust_mask,
)
from .model import (
    ModelParams,
    compose_masked_input,
    extract_subset,
    forward,
    init_params,
    load_checkpoint,
    predict_class,
    save_checkpoint,
)
from .oracle import (
    FrozenChecker,
    OracleConfig,
    brute_force_msr,
    greedy_sufficient_reason,
)
from .training import TrainConfig, TrainLog, train, sweep_xi

__version__ = "0.1.0"

__all__ = [
    "BaselineMasking",
    "Dataset",
    "FrozenChecker",
    "MaskingStrategy",
    "MetricsReport",
    "ModelParams",
    "OracleConfig",
    "ProbabilisticMasking",
    "RobustMasking",
    "SyntheticSpec",
    "TrainConfig",
    "TrainLog",
    "baseline_mask",
    "brute_force_msr",
    "compose_masked_input",
    "eval_accuracy",
    "eval_cross",
    "eval_faithfulness",
    "eval_size_and_time",
    "extract_subset",
    "forward",
    "gen_synthetic",
    "greedy_sufficient_reason",
    "init_params",
    "load_checkpoint",
    "load_idx",
    "metrics_report",
    "predict_class",
    "probabilistic_mask",
    "robust_mask",
    "save_checkpoint",
    "split",
    "sweep_xi",
    "train",
]
