"""scikit-learn style wrappers around the forecaster."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .data import IrregularSeries, WindowPair, drop_random, make_windows, split_chronological
from .embeddings import PEMethodConfig
from .errors import BadParams, EmptyDataset, SeriesTooShort, ShapeMismatch
from .model import Forecaster, ModelConfig, TrainingConfig, evaluate, predict, train


def check_series(series, min_length=2):
    """Accept an IrregularSeries or a ``(timestamps, values)`` pair."""
    if isinstance(series, tuple) and len(series) == 2:
        series = IrregularSeries(*series)
    if not isinstance(series, IrregularSeries):
        raise TypeError(f"expected IrregularSeries, got {type(series).__name__}")
    if len(series) < min_length:
        raise SeriesTooShort(f"need at least {min_length} observations, got {len(series)}")
    if not np.all(np.isfinite(series.timestamps)):
        raise ValueError("timestamps must be finite")
    return series


def check_windows(windows, n_vars=None, lookback=None, horizon=None):
    windows = list(windows)
    if not windows:
        raise EmptyDataset("no windows given")
    for w in windows:
        if not isinstance(w, WindowPair):
            raise TypeError(f"expected WindowPair, got {type(w).__name__}")
        if lookback is not None and len(w.past_times) != lookback:
            raise ShapeMismatch(f"window lookback {len(w.past_times)} != {lookback}")
        if horizon is not None and len(w.future_times) != horizon:
            raise ShapeMismatch(f"window horizon {len(w.future_times)} != {horizon}")
        if n_vars is not None and w.past_values.shape[1] != n_vars:
            raise ShapeMismatch(f"window has {w.past_values.shape[1]} variables, expected {n_vars}")
    return windows


class RandomDropper(TransformerMixin, BaseEstimator):
    """Irregularize a series by deleting a random fraction of observations."""

    def __init__(self, missing_rate=0.4, random_state=0):
        self.missing_rate = missing_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        check_series(X)
        return self

    def transform(self, X):
        return drop_random(check_series(X), self.missing_rate, self.random_state)


class IrregularForecaster(BaseEstimator):
    """Fit on an irregular series, forecast ``horizon`` observations ahead.

    Values are standardized with training statistics before windowing; the
    model additionally applies per-window RevIN.  ``predict`` and ``score``
    take windows on the original scale.
    """

    def __init__(
        self,
        pe_method="ctlpe",
        lookback=48,
        horizon=24,
        d_model=32,
        n_heads=4,
        encoder_depth=2,
        decoder_depth=1,
        feedforward_width=64,
        dropout_rate=0.05,
        label_len=None,
        epochs=10,
        batch_size=32,
        learning_rate=1e-3,
        patience=3,
        validation_fraction=0.1,
        stride=1,
        random_state=0,
    ):
        self.pe_method = pe_method
        self.lookback = lookback
        self.horizon = horizon
        self.d_model = d_model
        self.n_heads = n_heads
        self.encoder_depth = encoder_depth
        self.decoder_depth = decoder_depth
        self.feedforward_width = feedforward_width
        self.dropout_rate = dropout_rate
        self.label_len = label_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.stride = stride
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            encoder_depth=self.encoder_depth,
            decoder_depth=self.decoder_depth,
            feedforward_width=self.feedforward_width,
            label_len=self.label_len,
            dropout_rate=self.dropout_rate,
            pe=PEMethodConfig.from_value(self.pe_method, d_model=self.d_model),
        )

    def _scaled(self, series):
        return IrregularSeries(series.timestamps, self.scaler_.transform(series.values), series.variable_names)

    def fit(self, X, y=None, validation=None):
        series = check_series(X, min_length=self.lookback + self.horizon)
        if not 0.0 <= self.validation_fraction < 1.0:
            raise BadParams("validation_fraction must be in [0, 1)")
        if validation is None and self.validation_fraction > 0:
            series, validation, _ = split_chronological(
                series, (1.0 - self.validation_fraction, self.validation_fraction, 0.0)
            )
        self.scaler_ = StandardScaler().fit(series.values)
        self.n_vars_ = series.n_vars
        self.base_interval_ = series.base_interval()
        train_windows = make_windows(self._scaled(series), self.lookback, self.horizon, self.stride)
        val_windows = []
        if validation is not None and len(validation) >= self.horizon:
            tail = series.slice(max(len(series) - self.lookback, 0), len(series))
            joined = IrregularSeries(
                np.concatenate([tail.timestamps, validation.timestamps]),
                np.concatenate([tail.values, validation.values]),
                series.variable_names,
            )
            if len(joined) >= self.lookback + self.horizon:
                val_windows = make_windows(self._scaled(joined), self.lookback, self.horizon, self.stride)
        spans = [w.times[-1] - w.times[0] for w in train_windows]
        self.model_ = Forecaster(
            self._model_config(),
            self.n_vars_,
            self.lookback,
            self.horizon,
            seed=self.random_state,
            base_interval=self.base_interval_,
            pe_table_size=int(np.ceil(2 * max(spans) / self.base_interval_)) + 1,
            median_gap=float(np.median(np.diff(series.timestamps))) / self.base_interval_,
        )
        self.training_log_ = train(
            self.model_,
            train_windows,
            val_windows,
            TrainingConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                patience=self.patience,
                seed=self.random_state,
            ),
        )
        return self

    def _scale_windows(self, windows):
        mean, scale = self.scaler_.mean_, self.scaler_.scale_
        return [
            WindowPair(
                w.past_times,
                (w.past_values - mean) / scale,
                w.past_features,
                w.future_times,
                (w.future_values - mean) / scale,
                w.future_features,
                w.target_mask,
            )
            for w in windows
        ]

    def predict(self, X):
        """Forecasts of shape (n_windows, horizon, n_vars) on the original scale."""
        check_is_fitted(self, "model_")
        windows = self._windows(X)
        scaled = predict(self.model_, self._scale_windows(windows))
        return scaled * self.scaler_.scale_ + self.scaler_.mean_

    def score(self, X, y=None):
        """Negative masked MSE on the standardized scale (higher is better)."""
        check_is_fitted(self, "model_")
        mse, _ = evaluate(self.model_, self._scale_windows(self._windows(X)))
        return -mse

    def _windows(self, X):
        if isinstance(X, IrregularSeries):
            X = make_windows(X, self.lookback, self.horizon, self.stride)
        return check_windows(X, self.n_vars_, self.lookback, self.horizon)
