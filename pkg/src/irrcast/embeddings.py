"""Positional embeddings for irregular windows and distance-based property checks.

All embedding classes share one interface: ``parameters()``, ``forward(ctx)``
returning a ``(B, T, d_model)`` tensor for a batch of windows, and
``embed_times(times)`` returning the embedding as a plain function of real
times (used by the property checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, parameter, xavier_uniform
from .data import FEATURE_NAMES, N_TIME_FEATURES, window_time_features
from .errors import (
    FieldOutOfRange,
    NonFiniteInput,
    OddDimension,
    ShapeMismatch,
    TimeOutOfTableRange,
    TooFewSamples,
    WindowTooLong,
)

METHODS = (
    "ctlpe",
    "ctlpe_no_bias",
    "sinusoidal",
    "irr_sinusoidal",
    "uniform",
    "time_feature",
    "simple",
    "simple_overlap",
    "ncde",
)

# Reference epoch for ``embed_times`` on calendar-aware methods (2016-07-01 UTC).
_CALENDAR_ANCHOR = 1467331200.0


@dataclass
class PEContext:
    """Per-window position inputs for a batch.

    rel_time: (B, T) time within the window span scaled to [0, 1].
    offset:   (B, T) time since window start in base-interval units.
    features: (B, T, 7) time features.
    order:    (B, T) integer position within the window.
    """

    rel_time: np.ndarray
    offset: np.ndarray
    features: np.ndarray
    order: np.ndarray

    @classmethod
    def from_windows(cls, windows, base_interval):
        times = np.stack([w.times for w in windows])
        feats = np.stack([w.features for w in windows])
        offset = (times - times[:, :1]) / base_interval
        order = np.broadcast_to(np.arange(times.shape[1]), times.shape).copy()
        return cls(rel_time=feats[..., 0].copy(), offset=offset, features=feats, order=order)

    @classmethod
    def from_times(cls, times, base_interval=3600.0, span=None, anchor=_CALENDAR_ANCHOR):
        """Single-window context for raw real ``times`` (base-interval units)."""
        t = np.asarray(times, dtype=np.float64)
        stamps = anchor + t * base_interval
        lo, hi = (0.0, 1.0) if span is None else span
        feats = window_time_features(stamps, anchor + lo * base_interval, anchor + hi * base_interval)
        order = np.argsort(np.argsort(t, kind="stable"), kind="stable")
        return cls(rel_time=feats[None, :, 0], offset=t[None], features=feats[None], order=order[None])


@dataclass
class PEMethodConfig:
    method: str = "ctlpe"
    d_model: int = 32
    grid_resolution: float | None = None
    max_len: int | None = None
    time_scale: float | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown positional embedding {self.method!r}; choose from {METHODS}")
        if self.d_model < 1:
            raise ValueError("d_model must be positive")

    @classmethod
    def from_value(cls, value, d_model=32):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls(method=value, d_model=d_model)
        value = dict(value)
        value.setdefault("d_model", d_model)
        known = {k: value.pop(k) for k in ("method", "d_model", "grid_resolution", "max_len", "time_scale") if k in value}
        return cls(**known, options=value)


# -- functional forms ------------------------------------------------------

def _check_finite(times):
    times = np.asarray(times, dtype=np.float64)
    if not np.all(np.isfinite(times)):
        raise NonFiniteInput("times must be finite")
    return times


def ctlpe(times, slope, bias, use_bias=True):
    """Row j, channel c: ``slope[c] * times[j] + bias[c]``; works on batched times."""
    times = _check_finite(times)
    slope = as_tensor(slope)
    out = Tensor(times[..., None]) * slope
    if use_bias:
        out = out + as_tensor(bias)
    return out


def _sinusoid(pos, d_model):
    if d_model % 2:
        raise OddDimension(f"sinusoidal embeddings need an even d_model, got {d_model}")
    pos = np.asarray(pos, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (np.arange(0, d_model, 2) / d_model)
    angle = pos[..., None] * freq
    out = np.empty(pos.shape + (d_model,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def sinusoidal_pe(positions, d_model):
    positions = np.asarray(positions)
    if np.any(positions < 0):
        raise ValueError("positions must be nonnegative")
    return _sinusoid(positions, d_model)


def irr_sinusoidal_pe(times, d_model, time_scale=1.0):
    return _sinusoid(_check_finite(times) * time_scale, d_model)


# table sizes for the calendar fields: month, day, weekday, hour, minute
CALENDAR_FIELDS = (("month", 12), ("day", 31), ("weekday", 7), ("hour", 24), ("minute", 60))


def calendar_indices(features):
    """Recover integer calendar indices from scaled [-0.5, 0.5] feature columns."""
    features = np.asarray(features)
    out = []
    for name, size in CALENDAR_FIELDS:
        col = features[..., FEATURE_NAMES.index(name)]
        if np.any(col < -0.5 - 1e-9) or np.any(col > 0.5 + 1e-9):
            raise FieldOutOfRange(f"{name} feature outside [-0.5, 0.5]")
        out.append(np.rint((col + 0.5) * (size - 1)).astype(np.int64))
    return out


def uniform_pe(features, tables, d_model, order=None):
    """Sum of learned calendar-field embeddings plus the fixed sinusoidal order term."""
    features = np.asarray(features)
    if order is None:
        order = np.broadcast_to(np.arange(features.shape[-2]), features.shape[:-1])
    out = Tensor(sinusoidal_pe(order, d_model))
    for (name, _), idx, table in zip(CALENDAR_FIELDS, calendar_indices(features), tables):
        if table.shape[-1] != d_model:
            raise ShapeMismatch(f"{name} table width differs from d_model")
        out = out + table[idx]
    return out


def time_feature_pe(features, weight, bias=None):
    features = np.asarray(features, dtype=np.float64)
    weight = as_tensor(weight)
    if features.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"{features.shape[-1]} features but projection expects {weight.shape[0]}")
    out = Tensor(features) @ weight
    return out if bias is None else out + bias


def simple_pe(times, grid_resolution, table):
    idx = np.rint(_check_finite(times) / grid_resolution).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        bad = float(np.asarray(times).reshape(-1)[np.argmax((idx < 0) | (idx >= table.shape[0]))])
        raise TimeOutOfTableRange(
            f"time {bad} maps outside the {table.shape[0]}-cell table (resolution {grid_resolution})"
        )
    return table[idx]


def simple_overlap_pe(count, table, batch_shape=()):
    if count > table.shape[0]:
        raise WindowTooLong(f"window of {count} observations exceeds max_len {table.shape[0]}")
    idx = np.broadcast_to(np.arange(count), tuple(batch_shape) + (count,))
    return table[idx]


# -- embedding modules -----------------------------------------------------

class PositionalEmbedding:
    method = None
    learnable = True
    uses_timestamps = True

    def __init__(self, d_model):
        self.d_model = d_model

    def parameters(self):
        return []

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def forward(self, ctx):
        raise NotImplementedError

    def __call__(self, ctx):
        return self.forward(ctx)

    def embed_times(self, times):
        return self.forward(PEContext.from_times(times)).data[0]


class CTLPE(PositionalEmbedding):
    method = "ctlpe"

    def __init__(self, d_model, rng, use_bias=True, init_range=0.1):
        super().__init__(d_model)
        self.use_bias = use_bias
        self.slope = parameter(rng.uniform(-init_range, init_range, size=d_model), name="pe.slope")
        self.bias = parameter(np.zeros(d_model), name="pe.bias")
        if not use_bias:
            self.method = "ctlpe_no_bias"

    def parameters(self):
        return [self.slope, self.bias] if self.use_bias else [self.slope]

    def forward(self, ctx):
        return ctlpe(ctx.rel_time, self.slope, self.bias, self.use_bias)

    def embed_times(self, times):
        return ctlpe(times, self.slope, self.bias, self.use_bias).data


class Sinusoidal(PositionalEmbedding):
    method = "sinusoidal"
    learnable = False
    uses_timestamps = False

    def forward(self, ctx):
        return Tensor(sinusoidal_pe(ctx.order, self.d_model))


class IrrSinusoidal(PositionalEmbedding):
    method = "irr_sinusoidal"
    learnable = False

    def __init__(self, d_model, time_scale=1.0):
        super().__init__(d_model)
        if d_model % 2:
            raise OddDimension(f"sinusoidal embeddings need an even d_model, got {d_model}")
        self.time_scale = time_scale

    def forward(self, ctx):
        return Tensor(irr_sinusoidal_pe(ctx.offset, self.d_model, self.time_scale))

    def embed_times(self, times):
        return irr_sinusoidal_pe(times, self.d_model, self.time_scale)


class UniformEmbedding(PositionalEmbedding):
    method = "uniform"

    def __init__(self, d_model, rng):
        super().__init__(d_model)
        self.tables = [
            parameter(xavier_uniform(rng, size, d_model), name=f"pe.{name}_table") for name, size in CALENDAR_FIELDS
        ]

    def parameters(self):
        return list(self.tables)

    def forward(self, ctx):
        return uniform_pe(ctx.features, self.tables, self.d_model, order=ctx.order)


class TimeFeatureEmbedding(PositionalEmbedding):
    method = "time_feature"

    def __init__(self, d_model, rng):
        super().__init__(d_model)
        self.weight = parameter(xavier_uniform(rng, N_TIME_FEATURES, d_model), name="pe.weight")
        self.bias = parameter(np.zeros(d_model), name="pe.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, ctx):
        return time_feature_pe(ctx.features, self.weight, self.bias)


class SimpleEmbedding(PositionalEmbedding):
    """One learnable row per grid cell of window-relative time."""

    method = "simple"

    def __init__(self, d_model, rng, table_size, grid_resolution=1.0):
        super().__init__(d_model)
        self.grid_resolution = grid_resolution
        self.table = parameter(xavier_uniform(rng, table_size, d_model), name="pe.table")

    def parameters(self):
        return [self.table]

    def forward(self, ctx):
        return simple_pe(ctx.offset, self.grid_resolution, self.table)

    def embed_times(self, times):
        return simple_pe(times, self.grid_resolution, self.table).data


class SimpleOverlapEmbedding(PositionalEmbedding):
    method = "simple_overlap"
    uses_timestamps = False

    def __init__(self, d_model, rng, max_len):
        super().__init__(d_model)
        self.table = parameter(xavier_uniform(rng, max_len, d_model), name="pe.table")

    @property
    def max_len(self):
        return self.table.shape[0]

    def parameters(self):
        return [self.table]

    def forward(self, ctx):
        if ctx.order.shape[-1] > self.max_len:
            raise WindowTooLong(f"window of {ctx.order.shape[-1]} observations exceeds max_len {self.max_len}")
        return self.table[ctx.order]


def make_pe(config, rng, window_length=None, table_size=None, median_gap=1.0):
    """Build the embedding named by ``config.method``.

    ``window_length`` (N + M) sizes order-keyed tables; ``table_size``
    sizes the time-keyed ``simple`` table; ``median_gap`` (base-interval
    units) sets the default irr-sinusoidal time scale.
    """
    config = PEMethodConfig.from_value(config)
    d = config.d_model
    m = config.method
    if m in ("ctlpe", "ctlpe_no_bias"):
        return CTLPE(d, rng, use_bias=(m == "ctlpe"), init_range=config.options.get("init_range", 0.1))
    if m == "sinusoidal":
        if d % 2:
            raise OddDimension(f"sinusoidal embeddings need an even d_model, got {d}")
        return Sinusoidal(d)
    if m == "irr_sinusoidal":
        scale = config.time_scale if config.time_scale is not None else 1.0 / median_gap
        return IrrSinusoidal(d, time_scale=scale)
    if m == "uniform":
        return UniformEmbedding(d, rng)
    if m == "time_feature":
        return TimeFeatureEmbedding(d, rng)
    if m == "simple":
        resolution = config.grid_resolution or 1.0
        size = table_size or config.max_len or 64
        return SimpleEmbedding(d, rng, int(size), resolution)
    if m == "simple_overlap":
        return SimpleOverlapEmbedding(d, rng, int(config.max_len or window_length or 64))
    from .ncde import NCDEEmbedding

    return NCDEEmbedding(d, rng, **config.options)


# -- distances and property checks -----------------------------------------

def pe_distance(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatch(f"embedding rows differ in shape: {p.shape} vs {q.shape}")
    return float(np.linalg.norm(p - q))


def pairwise_distances(rows):
    rows = np.asarray(rows, dtype=np.float64)
    diff = rows[:, None, :] - rows[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


@dataclass
class MonotonicityReport:
    violations: int
    comparable: int
    witnesses: list

    @property
    def passed(self):
        return self.violations == 0


def check_monotonicity(pe, sample_times, tol=1e-9, max_witnesses=10):
    """Count triples with |t1-t2| > |t1-t3| but d(p1,p2) <= d(p1,p3) + tol.

    ``pe`` maps an array of times to an (n, d) array of embedding rows.
    """
    times = np.asarray(sample_times, dtype=np.float64)
    if np.unique(times).size < 3:
        raise TooFewSamples("need at least three distinct times")
    rows = np.asarray(pe(times), dtype=np.float64)
    dist = pairwise_distances(rows)
    gaps = np.abs(times[:, None] - times[None, :])
    violations = comparable = 0
    witnesses = []
    for i in range(times.size):
        wider = gaps[i][:, None] > gaps[i][None, :]
        bad = wider & (dist[i][:, None] <= dist[i][None, :] + tol)
        comparable += int(wider.sum())
        count = int(bad.sum())
        if count:
            violations += count
            if len(witnesses) < max_witnesses:
                j, k = np.argwhere(bad)[0]
                witnesses.append((float(times[i]), float(times[j]), float(times[k])))
    return MonotonicityReport(violations, comparable, witnesses)


def check_translation_invariance(pe, base_times, lag):
    """max over t of |d(p(t), p(t+lag)) - d(p(t0), p(t0+lag))|."""
    base = np.asarray(base_times, dtype=np.float64)
    if lag == 0:
        raise ValueError("lag must be nonzero")
    if base.size < 2:
        raise TooFewSamples("need at least two base times")
    here = np.asarray(pe(base))
    there = np.asarray(pe(base + lag))
    d = np.sqrt(((here - there) ** 2).sum(-1))
    return float(np.max(np.abs(d - d[0])))


def largest_period(d_model, time_scale=1.0):
    """Longest wavelength (in time units) among the sinusoid channels."""
    i = d_model // 2 - 1
    return 2 * math.pi * 10000.0 ** (2 * i / d_model) / time_scale
