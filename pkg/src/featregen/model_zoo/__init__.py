from .checkpoint import CorruptionError, load_model, save_model
from .datasets import DatasetHandle, load_dataset, registered_datasets, split_indices
from .networks import ARCHITECTURES, ModelHandle, build_model, parameter_hash
from .training import BaselineHyper, TrainingError, predict, top1, train_baseline

__all__ = [
    "ARCHITECTURES", "BaselineHyper", "CorruptionError", "DatasetHandle", "ModelHandle",
    "TrainingError", "build_model", "load_dataset", "load_model", "parameter_hash", "predict",
    "registered_datasets", "save_model", "split_indices", "top1", "train_baseline",
]
