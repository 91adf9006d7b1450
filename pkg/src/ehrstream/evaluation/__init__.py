from .bootstrap import BootstrapResult, bootstrap_ci, bootstrap_compare, resample_indices
from .features import FeatureVector, context_window, featurize, featurize_many
from .head import DEFAULT_L2_GRID, LogisticHead, fit_logistic, objective, train_head
from .metrics import SingleClassError, auroc, brier
from .protocols import (
    FEW_SHOT_KS,
    EvalReport,
    StratifiedTable,
    TaskData,
    evaluate_predictions,
    few_shot,
    sample_k_shot,
    stratified_brier,
    stratified_compare,
    zero_shot_prob,
)

__all__ = [
    "BootstrapResult",
    "DEFAULT_L2_GRID",
    "EvalReport",
    "FEW_SHOT_KS",
    "FeatureVector",
    "LogisticHead",
    "SingleClassError",
    "StratifiedTable",
    "TaskData",
    "auroc",
    "bootstrap_ci",
    "bootstrap_compare",
    "brier",
    "context_window",
    "evaluate_predictions",
    "featurize",
    "featurize_many",
    "few_shot",
    "fit_logistic",
    "objective",
    "resample_indices",
    "sample_k_shot",
    "stratified_brier",
    "stratified_compare",
    "train_head",
    "zero_shot_prob",
]
