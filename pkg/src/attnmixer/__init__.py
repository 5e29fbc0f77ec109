"""Cascaded spatial/temporal attention forecaster for multivariate monitoring logs.

Everything runs on a small reverse-mode autodiff engine over numpy
(:mod:`attnmixer.autodiff`).
"""
from .data import SeriesFrame, SynthSpec, g1_spec, gen_synthetic, load_csv, load_params, save_params, write_csv
from .errors import AttnMixerError, ConfigError, DataError, StorageError, TrainingDivergenceError
from .evaluate import Metrics, anomaly_score, attention_stats, export_attention, metrics
from .model import MixerConfig, count_flops, init_params, measure_flops, mixer_forward
from .training import TrainSettings, predict, prepare, train

__version__ = "0.1.0"

__all__ = [
    "AttnMixerError", "ConfigError", "DataError", "Metrics", "MixerConfig", "SeriesFrame", "StorageError",
    "SynthSpec", "TrainSettings", "TrainingDivergenceError", "anomaly_score", "attention_stats", "count_flops",
    "export_attention", "g1_spec", "gen_synthetic", "init_params", "load_csv", "load_params", "measure_flops",
    "metrics", "mixer_forward", "predict", "prepare", "save_params", "train", "write_csv",
]
