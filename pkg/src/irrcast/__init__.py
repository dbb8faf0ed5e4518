"""Irregular time-series forecasting with continuous-time positional embeddings."""

from .data import IrregularSeries, WindowPair, drop_random, load_csv, make_windows, split_chronological, synth_generate
from .embeddings import METHODS, PEContext, PEMethodConfig, make_pe
from .estimator import IrregularForecaster, RandomDropper
from .model import Forecaster, ModelConfig, TrainingConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "IrregularSeries",
    "WindowPair",
    "drop_random",
    "load_csv",
    "make_windows",
    "split_chronological",
    "synth_generate",
    "METHODS",
    "PEContext",
    "PEMethodConfig",
    "make_pe",
    "IrregularForecaster",
    "RandomDropper",
    "Forecaster",
    "ModelConfig",
    "TrainingConfig",
    "evaluate",
    "train",
]
