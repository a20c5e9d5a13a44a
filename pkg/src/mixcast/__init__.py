"""Probabilistic multi-horizon time-series forecasting.

A stochastic encoder-decoder attention network whose repeated seeded noisy
passes define an equal-weight mixture forecast, trained by a LogSumExp-
stabilized mixture negative log-likelihood, with calibration, sharpness, and
event-sliced accuracy evaluation plus synthetic and glucose-trace pipelines.
"""

from .dist import BaseKind, MixtureSample, SufficientStats
from .model import (
    ModelConfig, ModelParams, WindowSample, predict_distribution,
    stochastic_forward,
)
from .train import TrainConfig, train

__all__ = [
    "BaseKind",
    "MixtureSample",
    "SufficientStats",
    "ModelConfig",
    "ModelParams",
    "WindowSample",
    "predict_distribution",
    "stochastic_forward",
    "TrainConfig",
    "train",
]
