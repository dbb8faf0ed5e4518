"""Series ingestion, irregularisation, windowing, time features and RevIN."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .autodiff import Tensor, as_tensor, parameter
from .errors import (
    AllNullVariable,
    BadFractions,
    BadParams,
    DegenerateSpan,
    NonMonotonicTimestamps,
    ParseError,
    RateOutOfRange,
    SeriesTooShort,
    ShapeMismatch,
)

HOUR = 3600.0
# absolute_time is epoch seconds in units of a century
ABSOLUTE_TIME_SCALE = 100 * 365.25 * 86400.0
N_TIME_FEATURES = 7
FEATURE_NAMES = ("relative_time", "absolute_time", "month", "day", "weekday", "hour", "minute")
DEFAULT_START = datetime(2016, 7, 1, tzinfo=timezone.utc).timestamp()


@dataclass(frozen=True)
class IrregularSeries:
    """Timestamped multivariate observations; NaN marks a null entry."""

    timestamps: np.ndarray
    values: np.ndarray
    variable_names: tuple = ()

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != ts.shape[0]:
            raise ShapeMismatch(f"{ts.shape[0]} timestamps but {vals.shape[0]} value rows")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise NonMonotonicTimestamps("timestamps must be strictly increasing")
        names = tuple(self.variable_names) or tuple(f"x{i}" for i in range(vals.shape[1]))
        if len(names) != vals.shape[1]:
            raise ShapeMismatch("one variable name per column required")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "variable_names", names)

    def __len__(self):
        return self.timestamps.shape[0]

    @property
    def n_vars(self):
        return self.values.shape[1]

    def slice(self, start, stop):
        return IrregularSeries(self.timestamps[start:stop], self.values[start:stop], self.variable_names)

    def base_interval(self):
        """Smallest positive gap; the sampling grid of a pre-drop series."""
        if len(self) < 2:
            return 1.0
        return float(np.min(np.diff(self.timestamps)))


@dataclass(frozen=True)
class TimeFeatureVector:
    relative_time: float
    absolute_time: float
    month: float
    day: float
    weekday: float
    hour: float
    minute: float

    def as_array(self):
        return np.array([getattr(self, name) for name in FEATURE_NAMES])


@dataclass
class WindowPair:
    past_times: np.ndarray
    past_values: np.ndarray
    past_features: np.ndarray
    future_times: np.ndarray
    future_values: np.ndarray
    future_features: np.ndarray
    target_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.target_mask is None:
            self.target_mask = ~np.isnan(self.future_values)
        if self.past_times[-1] >= self.future_times[0]:
            raise NonMonotonicTimestamps("past window must end before the future window starts")

    @property
    def times(self):
        return np.concatenate([self.past_times, self.future_times])

    @property
    def features(self):
        return np.concatenate([self.past_features, self.future_features])


# -- ingestion -----------------------------------------------------------

def _parse_time(text, row):
    try:
        stamp = datetime.strptime(text.strip(), "%Y-%m-%d %H:%M:%S")
    except ValueError:
        try:
            stamp = datetime.fromisoformat(text.strip())
        except ValueError:
            raise ParseError(f"bad timestamp {text!r}", row) from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def load_csv(path, columns=None):
    """Read a ``date,<var>,...`` CSV; empty cells become nulls.

    ``columns`` optionally selects and orders the variable columns.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if not header or header[0].strip() != "date":
            raise ParseError("first column must be named 'date'", 1)
        names = [h.strip() for h in header[1:]]
        missing = [c for c in (columns or ()) if c not in names]
        if missing:
            raise ParseError(f"unknown columns {missing}", 1)
        wanted = list(range(len(names))) if columns is None else [names.index(c) for c in columns]
        times, rows = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(record)}", lineno)
            times.append(_parse_time(record[0], lineno))
            parsed = []
            for j in wanted:
                cell = record[j + 1].strip()
                if cell == "":
                    parsed.append(np.nan)
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", lineno) from None
            rows.append(parsed)
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(rows, dtype=np.float64).reshape(len(times), len(wanted))
    order = np.argsort(times, kind="stable")
    times, values = times[order], values[order]
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise NonMonotonicTimestamps("duplicate timestamps in CSV")
    return IrregularSeries(times, values, tuple(names[j] for j in wanted))


def save_csv(series, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", *series.variable_names])
        for t, row in zip(series.timestamps, series.values):
            stamp = datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
            writer.writerow([stamp, *("" if np.isnan(v) else repr(float(v)) for v in row)])


# -- irregularisation / splitting -----------------------------------------

def drop_random(series, missing_rate, seed):
    """Remove floor(rate * n) whole observations; endpoints always survive."""
    if not 0.0 <= missing_rate < 1.0:
        raise RateOutOfRange(f"missing rate {missing_rate} not in [0, 1)")
    n = len(series)
    if n < 2:
        raise SeriesTooShort("need at least 2 observations")
    k = int(math.floor(missing_rate * n))
    if k == 0:
        return series
    if k > n - 2:
        raise RateOutOfRange(f"cannot drop {k} of {n} observations while keeping both endpoints")
    rng = np.random.default_rng(seed)
    dropped = rng.choice(np.arange(1, n - 1), size=k, replace=False)
    keep = np.ones(n, dtype=bool)
    keep[dropped] = False
    return IrregularSeries(series.timestamps[keep], series.values[keep], series.variable_names)


def split_chronological(series, fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"need three nonnegative fractions summing to 1, got {fractions}")
    n = len(series)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    cuts = (0, n_train, n_train + n_val, n)
    return tuple(series.slice(cuts[i], cuts[i + 1]) for i in range(3))


# -- time features ---------------------------------------------------------

def calendar_fields(timestamps):
    """Month, day, weekday, hour, minute for UTC epoch seconds (vectorised)."""
    secs = np.floor(np.asarray(timestamps, dtype=np.float64)).astype("int64").astype("datetime64[s]")
    days = secs.astype("datetime64[D]")
    months = secs.astype("datetime64[M]")
    month = months.astype(np.int64) % 12 + 1
    day = (days - months.astype("datetime64[D]")).astype(np.int64) + 1
    weekday = (days.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0
    in_day = (secs - days.astype("datetime64[s]")).astype(np.int64)
    return month, day, weekday, in_day // 3600, (in_day % 3600) // 60


def window_time_features(timestamps, t_start, t_end):
    """Feature matrix (n, 7) ordered as :data:`FEATURE_NAMES`."""
    if not t_end > t_start:
        raise DegenerateSpan(f"window span [{t_start}, {t_end}] is empty")
    ts = np.asarray(timestamps, dtype=np.float64)
    month, day, weekday, hour, minute = calendar_fields(ts)
    return np.stack(
        [
            (ts - t_start) / (t_end - t_start),
            ts / ABSOLUTE_TIME_SCALE,
            (month - 1) / 11.0 - 0.5,
            (day - 1) / 30.0 - 0.5,
            weekday / 6.0 - 0.5,
            hour / 23.0 - 0.5,
            minute / 59.0 - 0.5,
        ],
        axis=-1,
    )


def time_features(timestamp, window_span):
    t_start, t_end = window_span
    row = window_time_features(np.array([timestamp]), t_start, t_end)[0]
    return TimeFeatureVector(*row.tolist())


# -- windows ---------------------------------------------------------------

def make_windows(series, N, M, stride=1):
    """Slide over observation indices; every pair has exactly N past and M future points."""
    if N < 1 or M < 1 or stride < 1:
        raise ValueError("N, M and stride must be positive")
    n = len(series)
    if N + M > n:
        raise SeriesTooShort(f"series of length {n} cannot hold a window of {N}+{M}")
    windows = []
    for start in range(0, n - N - M + 1, stride):
        ts = series.timestamps[start : start + N + M]
        vals = series.values[start : start + N + M]
        feats = window_time_features(ts, ts[0], ts[-1])
        windows.append(
            WindowPair(
                past_times=ts[:N],
                past_values=vals[:N],
                past_features=feats[:N],
                future_times=ts[N:],
                future_values=vals[N:],
                future_features=feats[N:],
            )
        )
    return windows


def split_windows(series, fractions, N, M, stride=1):
    """Chronological split into train/val/test windows.

    Validation and test windows borrow the last N observations of the
    preceding split as lookback, so every future point belongs to exactly
    one split.
    """
    train, val, test = split_chronological(series, fractions)
    n_train, n_val = len(train), len(val)
    out = [make_windows(train, N, M, stride) if len(train) >= N + M else []]
    for lo, hi in ((n_train, n_train + n_val), (n_train + n_val, len(series))):
        if hi - lo < M:
            out.append([])
            continue
        ctx = series.slice(max(lo - N, 0), hi)
        out.append(make_windows(ctx, N, M, stride) if len(ctx) >= N + M else [])
    return tuple(out)


# -- synthetic data --------------------------------------------------------

def synth_generate(kind, params=None, length=2000, seed=0):
    """Deterministic hourly multivariate series.

    ``sine_mixture``: sum of sinusoids with per-variable phases, plus trend
    and Gaussian noise.  ``trend_season``: piecewise trend with one
    seasonal period.  ``ar_process``: stationary AR(2) per variable.
    """
    params = dict(params or {})
    if length < 2:
        raise BadParams("length must be at least 2")
    rng = np.random.default_rng(seed)
    n_vars = int(params.get("n_vars", 3))
    if n_vars < 1:
        raise BadParams("n_vars must be positive")
    step = float(params.get("interval_hours", 1.0)) * HOUR
    start = float(params.get("start", DEFAULT_START))
    t = np.arange(length, dtype=np.float64)
    noise = float(params.get("noise", 0.1))

    if kind == "sine_mixture":
        periods = np.atleast_1d(np.asarray(params.get("periods", (24.0, 24.0 * math.sqrt(3.0))), dtype=float))
        amplitudes = np.atleast_1d(np.asarray(params.get("amplitudes", 1.0), dtype=float))
        amplitudes = np.broadcast_to(amplitudes, periods.shape)
        if np.any(periods <= 0):
            raise BadParams("periods must be positive")
        phases = rng.uniform(0, 2 * np.pi, size=(n_vars, periods.size))
        trend = float(params.get("trend", 0.5))
        values = np.zeros((length, n_vars))
        for v in range(n_vars):
            for k, (period, amp) in enumerate(zip(periods, amplitudes)):
                values[:, v] += amp * np.sin(2 * np.pi * t / period + phases[v, k])
            values[:, v] += trend * (v + 1) * t / length
    elif kind == "trend_season":
        period = float(params.get("period", 24.0))
        slope = float(params.get("slope", 1.0))
        amplitude = float(params.get("amplitude", 1.0))
        phases = rng.uniform(0, 2 * np.pi, size=n_vars)
        values = slope * (t[:, None] / length) * np.arange(1, n_vars + 1) + amplitude * np.sin(
            2 * np.pi * t[:, None] / period + phases
        )
    elif kind == "ar_process":
        phi = np.asarray(params.get("coefficients", (0.6, 0.3)), dtype=float)
        if phi.shape != (2,) or abs(phi[1]) >= 1 or phi[0] + phi[1] >= 1 or phi[1] - phi[0] >= 1:
            raise BadParams("AR(2) coefficients must be stationary")
        values = np.zeros((length, n_vars))
        shocks = rng.normal(size=(length, n_vars))
        for i in range(2, length):
            values[i] = phi[0] * values[i - 1] + phi[1] * values[i - 2] + shocks[i]
        noise = 0.0
    else:
        raise BadParams(f"unknown generator {kind!r}")

    if noise > 0:
        values = values + rng.normal(scale=noise, size=values.shape)
    values = values + float(params.get("offset", 0.0))
    return IrregularSeries(start + t * step, values, tuple(f"x{i}" for i in range(n_vars)))


# -- RevIN -----------------------------------------------------------------

REVIN_EPS = 1e-5


@dataclass
class RevinStats:
    """Per-window, per-variable statistics plus the affine parameters used."""

    mean: np.ndarray
    std: np.ndarray
    gain: Tensor
    bias: Tensor


class RevIN:
    """Learnable-affine reversible instance normalisation over the time axis."""

    def __init__(self, n_vars, eps=REVIN_EPS, affine=True):
        self.n_vars = n_vars
        self.eps = eps
        self.gain = parameter(np.ones(n_vars), name="revin.gain") if affine else Tensor(np.ones(n_vars))
        self.bias = parameter(np.zeros(n_vars), name="revin.bias") if affine else Tensor(np.zeros(n_vars))

    def parameters(self):
        return [t for t in (self.gain, self.bias) if t.requires_grad]

    def normalize(self, values, mask=None):
        return revin_normalize(values, self.gain, self.bias, mask=mask, eps=self.eps)

    def denormalize(self, predictions, stats):
        return revin_denormalize(predictions, stats)


def revin_normalize(window_values, gain=None, bias=None, mask=None, eps=REVIN_EPS):
    """Standardise each variable over the time axis (axis -2), observed entries only.

    Returns ``(normalized, stats)``; null positions come back as 0.
    """
    raw = window_values.data if isinstance(window_values, Tensor) else np.asarray(window_values, float)
    if mask is None:
        mask = ~np.isnan(raw)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-2, keepdims=True)
    if np.any(counts == 0):
        raise AllNullVariable("a variable has no observed entries in the window")
    filled = np.where(mask, raw, 0.0)
    mu = filled.sum(axis=-2, keepdims=True) / counts
    var = (np.where(mask, raw - mu, 0.0) ** 2).sum(axis=-2, keepdims=True) / counts
    std = np.maximum(np.sqrt(var), eps)
    n_vars = raw.shape[-1]
    gain = Tensor(np.ones(n_vars)) if gain is None else as_tensor(gain)
    bias = Tensor(np.zeros(n_vars)) if bias is None else as_tensor(bias)
    if gain.shape != (n_vars,) or bias.shape != (n_vars,):
        raise ShapeMismatch("RevIN affine parameters must have one entry per variable")
    centred = np.where(mask, (raw - mu) / std, 0.0)
    out = Tensor(centred) * gain + bias
    out = out * Tensor(mask.astype(float))
    return out, RevinStats(mean=mu, std=std, gain=gain, bias=bias)


def revin_denormalize(predictions, stats):
    predictions = as_tensor(predictions)
    if predictions.shape[-1] != stats.mean.shape[-1]:
        raise ShapeMismatch("prediction variables do not match RevIN statistics")
    return (predictions - stats.bias) / stats.gain * Tensor(stats.std) + Tensor(stats.mean)
