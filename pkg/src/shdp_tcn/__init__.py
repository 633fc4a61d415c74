"""Topic-heat forecasting with a self-attention encoded temporal convolutional
network, built on a small reverse-mode autodiff core."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    DemandRecord,
    HeatSeries,
    Normalizer,
    SplitSpec,
    SyntheticSpec,
    WindowSample,
    compute_heat_series,
    dominant_topic,
    generate_synthetic,
    make_windows,
    topic_feature_lookup,
)
from .model import ModelConfig, Prediction, ShdpTcnModel, assemble_input, build, predict_horizon  # noqa: E402
from .tensor import Tape, Tensor, backward, grad_check  # noqa: E402
from .training import (  # noqa: E402
    EvalReport,
    TrainConfig,
    classification_metrics,
    evaluate,
    mse_loss,
    train,
    trend_labels,
)

__all__ = [
    "DemandRecord", "EvalReport", "HeatSeries", "ModelConfig", "Normalizer", "Prediction",
    "ShdpTcnModel", "SplitSpec", "SyntheticSpec", "Tape", "Tensor", "TrainConfig", "WindowSample",
    "assemble_input", "backward", "build", "classification_metrics", "compute_heat_series",
    "dominant_topic", "evaluate", "generate_synthetic", "grad_check", "make_windows", "mse_loss",
    "predict_horizon", "topic_feature_lookup", "train", "trend_labels",
]
