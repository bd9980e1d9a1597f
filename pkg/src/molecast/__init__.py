"""Mixture-of-linear-experts forecasting for long-horizon time series.

The package is a self-contained forecasting engine: a small reverse-mode
autodiff core over dense float64 matrices, three linear-centric forecast
models (trend/seasonal decomposition, instance-normalized linear, and its
residual-MLP variant), a timestamp-gated mixture layer that blends several
widened forecast heads per channel, and a training / experiment runner with
a CLI front end.
"""

from molecast.errors import ConfigError, DataError, NumericalError
from molecast.rng import Xoshiro256, derive_stream
from molecast.autodiff import Node, ParamStore, backward, grad_check, uniform_init
from molecast.data import (
    ChannelScaler,
    RawDataset,
    SplitView,
    WindowSet,
    load_csv,
    mark_features,
    split_dataset,
    toy_generate,
)
from molecast.models import ExpertSpec, init_params, model_forward, save_params, load_params
from molecast.mixture import (
    GatingConfig,
    combine,
    head_dropout,
    init_mole_params,
    mixing_weights,
    mole_forward,
)
from molecast.training import TrainConfig, FitReport, fit, mse, mae, param_count
from molecast.experiments import ExperimentConfig

__all__ = [
    "ChannelScaler",
    "ConfigError",
    "DataError",
    "ExperimentConfig",
    "ExpertSpec",
    "FitReport",
    "GatingConfig",
    "Node",
    "NumericalError",
    "ParamStore",
    "RawDataset",
    "SplitView",
    "TrainConfig",
    "WindowSet",
    "Xoshiro256",
    "backward",
    "combine",
    "derive_stream",
    "fit",
    "grad_check",
    "head_dropout",
    "init_mole_params",
    "init_params",
    "load_csv",
    "load_params",
    "mae",
    "mark_features",
    "mixing_weights",
    "model_forward",
    "mole_forward",
    "mse",
    "param_count",
    "save_params",
    "split_dataset",
    "toy_generate",
    "uniform_init",
]

__version__ = "0.1.0"
