from .layers import (
    BatchNorm,
    ConcatSkip,
    Conv3d,
    Flatten,
    Linear,
    MaxPool3d,
    ReLU,
    concat_skip,
    conv3d_backward,
    conv3d_forward,
    relu,
)
from .model_io import FORMAT_VERSION, MAGIC, load_model, save_model
from .network import (
    LayerSpec,
    Network,
    NetworkSpec,
    default_metric_spec,
    normalize_intensities,
    predict_tre,
    predict_tre_batch,
)
from .train import Adam, TrainConfig, TrainingLog, train

__all__ = [
    "Adam",
    "BatchNorm",
    "ConcatSkip",
    "Conv3d",
    "Flatten",
    "FORMAT_VERSION",
    "LayerSpec",
    "Linear",
    "MAGIC",
    "MaxPool3d",
    "Network",
    "NetworkSpec",
    "ReLU",
    "TrainConfig",
    "TrainingLog",
    "concat_skip",
    "conv3d_backward",
    "conv3d_forward",
    "default_metric_spec",
    "load_model",
    "normalize_intensities",
    "predict_tre",
    "predict_tre_batch",
    "relu",
    "save_model",
    "train",
]
