from .data import Dataset, SyntheticDatasetSpec, augment_batch, generate_dataset
from .engine import (
    TrainConfig,
    TrainResult,
    TrainingError,
    evaluate_miou,
    forward_backward,
    poly_lr,
    sgd_step,
    train,
)
from .hrnet import HrnetLiteSpec, build_hrnet_lite
from .pipelines import PipelineResult, run_slimming_pipeline, run_swd_pipeline

__all__ = [
    "Dataset",
    "SyntheticDatasetSpec",
    "augment_batch",
    "generate_dataset",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "evaluate_miou",
    "forward_backward",
    "poly_lr",
    "sgd_step",
    "train",
    "HrnetLiteSpec",
    "build_hrnet_lite",
    "PipelineResult",
    "run_slimming_pipeline",
    "run_swd_pipeline",
]
