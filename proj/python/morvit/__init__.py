from ._core import (
    ConfigError,
    DataError,
    Dataset,
    ModelConfig,
    NumericError,
    RunConfig,
    Session,
    ShapeError,
    TrainConfig,
    dataset_from_arrays,
    detect_degenerate,
    keep_count,
    load_cifar10,
    param_count,
    preset,
    preset_names,
    select_active,
    synth_dataset,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "ModelConfig",
    "NumericError",
    "RunConfig",
    "Session",
    "ShapeError",
    "TrainConfig",
    "dataset_from_arrays",
    "detect_degenerate",
    "keep_count",
    "load_cifar10",
    "param_count",
    "preset",
    "preset_names",
    "select_active",
    "synth_dataset",
]
