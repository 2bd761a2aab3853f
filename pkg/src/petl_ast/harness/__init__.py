from .data import (
    Dataset,
    SyntheticTaskSpec,
    few_shot_subsample,
    gen_synthetic_task,
    kfold_split,
    load_dataset,
    nearest_centroid_accuracy,
    save_dataset,
)
from .gradcheck import GradcheckResult, gradcheck
from .optim import AdamW, TrainConfig, adamw_step, cosine_lr
from .train import (
    MetricsRecord,
    NumericalError,
    PretrainConfig,
    TrainResult,
    adapt,
    backbone_records,
    default_lr,
    evaluate,
    pretrain_backbone,
    train,
)

__all__ = [
    "AdamW", "Dataset", "GradcheckResult", "MetricsRecord", "NumericalError", "PretrainConfig",
    "SyntheticTaskSpec", "TrainConfig", "TrainResult", "adamw_step", "adapt", "backbone_records",
    "cosine_lr", "default_lr", "evaluate", "few_shot_subsample", "gen_synthetic_task",
    "gradcheck", "kfold_split", "load_dataset", "nearest_centroid_accuracy",
    "pretrain_backbone", "save_dataset", "train",
]
