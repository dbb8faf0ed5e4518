"""Neural-CDE positional embedding: natural cubic spline control paths,
fixed-step RK4 integration on the tape, and grid tables for O(1) lookup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, parameter, reshape, stack, tanh, xavier_uniform
from .data import DEFAULT_START, N_TIME_FEATURES, window_time_features
from .embeddings import PositionalEmbedding
from .errors import NonFiniteState, NonMonotonicKnots, ParseError, TooFewKnots

DIVERGENCE_LIMIT = 1e6
TABLE_HEADER = "ctlpe-petable v1"
REFERENCE_EPOCH = DEFAULT_START


# -- natural cubic spline --------------------------------------------------

@dataclass(frozen=True)
class SplinePath:
    """Piecewise cubic ``a + b*dx + c*dx**2 + d*dx**3`` on each knot interval.

    ``knots`` has shape ``S + (n,)`` and each coefficient array
    ``S + (n-1, C)`` for a (possibly empty) batch shape ``S``.
    """

    knots: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    @property
    def batch_shape(self):
        return self.knots.shape[:-1]

    @property
    def channels(self):
        return self.a.shape[-1]

    @property
    def start(self):
        return self.knots[..., 0]

    @property
    def end(self):
        return self.knots[..., -1]


def _solve_tridiagonal(sub, diag, sup, rhs):
    """Thomas algorithm over the last-but-one axis of ``rhs``; batched."""
    n = diag.shape[-1]
    c_prime = np.empty_like(diag)
    d_prime = np.empty_like(rhs)
    c_prime[..., 0] = sup[..., 0] / diag[..., 0]
    d_prime[..., 0, :] = rhs[..., 0, :] / diag[..., 0, None]
    for i in range(1, n):
        denom = diag[..., i] - sub[..., i] * c_prime[..., i - 1]
        c_prime[..., i] = sup[..., i] / denom
        d_prime[..., i, :] = (rhs[..., i, :] - sub[..., i, None] * d_prime[..., i - 1, :]) / denom[..., None]
    x = np.empty_like(rhs)
    x[..., n - 1, :] = d_prime[..., n - 1, :]
    for i in range(n - 2, -1, -1):
        x[..., i, :] = d_prime[..., i, :] - c_prime[..., i, None] * x[..., i + 1, :]
    return x


def natural_cubic_spline(knot_times, knot_values):
    t = np.asarray(knot_times, dtype=np.float64)
    y = np.asarray(knot_values, dtype=np.float64)
    if y.ndim == t.ndim:
        y = y[..., None]
    n = t.shape[-1]
    if n < 2:
        raise TooFewKnots(f"a spline needs at least 2 knots, got {n}")
    if y.shape[:-1] != t.shape:
        raise ValueError(f"knot values {y.shape} do not match knot times {t.shape}")
    if not np.all(np.isfinite(t)) or not np.all(np.isfinite(y)):
        raise ValueError("knots must be finite")
    h = np.diff(t, axis=-1)
    if np.any(h <= 0):
        raise NonMonotonicKnots("knot times must be strictly increasing")

    slopes = np.diff(y, axis=-2) / h[..., None]
    second = np.zeros_like(y)
    if n > 2:
        rhs = 6.0 * (slopes[..., 1:, :] - slopes[..., :-1, :])
        diag = 2.0 * (h[..., :-1] + h[..., 1:])
        second[..., 1:-1, :] = _solve_tridiagonal(h[..., :-1], diag, h[..., 1:], rhs)
    m0, m1 = second[..., :-1, :], second[..., 1:, :]
    hh = h[..., None]
    return SplinePath(
        knots=t,
        a=y[..., :-1, :],
        b=slopes - hh * (2.0 * m0 + m1) / 6.0,
        c=m0 / 2.0,
        d=(m1 - m0) / (6.0 * hh),
    )


def _locate(path, t):
    """Interval index and offset for query times ``t``.

    For an unbatched path ``t`` may have any shape; for a batched path ``t``
    must have the path's batch shape (one query per series).
    """
    t = np.asarray(t, dtype=np.float64)
    n = path.knots.shape[-1]
    if path.batch_shape:
        if t.shape != path.batch_shape:
            t = np.broadcast_to(t, path.batch_shape)
        idx = (path.knots <= t[..., None]).sum(-1) - 1
    else:
        idx = np.searchsorted(path.knots, t, side="right") - 1
    idx = np.clip(idx, 0, n - 2)
    if path.batch_shape:
        left = np.take_along_axis(path.knots, idx[..., None], axis=-1)[..., 0]
    else:
        left = path.knots[idx]
    return t, idx, t - left


def _coef(path, arr, idx):
    if path.batch_shape:
        return np.take_along_axis(arr, idx[..., None, None], axis=-2)[..., 0, :]
    return arr[idx]


def _end_state(path):
    """Value and slope at the last knot."""
    h = path.knots[..., -1] - path.knots[..., -2]
    hh = h[..., None]
    a, b, c, d = path.a[..., -1, :], path.b[..., -1, :], path.c[..., -1, :], path.d[..., -1, :]
    return a + hh * (b + hh * (c + hh * d)), b + hh * (2 * c + 3 * d * hh)


def spline_eval(path, t):
    """Cubic inside the knot span, linear with the boundary slope outside."""
    t, idx, dx = _locate(path, t)
    dxx = dx[..., None]
    a, b, c, d = (_coef(path, arr, idx) for arr in (path.a, path.b, path.c, path.d))
    inside = a + dxx * (b + dxx * (c + dxx * d))
    start, end = path.start, path.end
    y_end, s_end = _end_state(path)
    below = (t < start)[..., None]
    above = (t > end)[..., None]
    y_start, s_start = path.a[..., 0, :], path.b[..., 0, :]
    if not path.batch_shape:
        y_start, s_start = np.broadcast_to(y_start, inside.shape), np.broadcast_to(s_start, inside.shape)
    out = np.where(below, y_start + s_start * (t - start)[..., None], inside)
    return np.where(above, y_end + s_end * (t - end)[..., None], out)


def spline_derivative(path, t):
    t, idx, dx = _locate(path, t)
    dxx = dx[..., None]
    b, c, d = (_coef(path, arr, idx) for arr in (path.b, path.c, path.d))
    inside = b + dxx * (2 * c + 3 * d * dxx)
    _, s_end = _end_state(path)
    s_start = path.b[..., 0, :]
    out = np.where((t < path.start)[..., None], s_start, inside)
    return np.where((t > path.end)[..., None], s_end, out)


def spline_second_derivative(path, t):
    t, idx, dx = _locate(path, t)
    c, d = _coef(path, path.c, idx), _coef(path, path.d, idx)
    inside = 2 * c + 6 * d * dx[..., None]
    outside = ((t < path.start) | (t > path.end))[..., None]
    return np.where(outside, 0.0, inside)


# -- vector field and initial-state networks --------------------------------

class NCDEParams:
    """Vector field f: R^w -> R^(w x C) (two-layer tanh MLP) and initial map zeta: R^C -> R^w."""

    def __init__(self, hidden_width, rng, channels=N_TIME_FEATURES, field_hidden=64):
        w, c = hidden_width, channels
        self.hidden_width = w
        self.channels = c
        self.zeta_weight = parameter(xavier_uniform(rng, c, w), name="ncde.zeta.weight")
        self.zeta_bias = parameter(np.zeros(w), name="ncde.zeta.bias")
        self.field_w1 = parameter(xavier_uniform(rng, w, field_hidden), name="ncde.field.w1")
        self.field_b1 = parameter(np.zeros(field_hidden), name="ncde.field.b1")
        self.field_w2 = parameter(xavier_uniform(rng, field_hidden, w * c), name="ncde.field.w2")
        self.field_b2 = parameter(np.zeros(w * c), name="ncde.field.b2")

    def parameters(self):
        return [self.zeta_weight, self.zeta_bias, self.field_w1, self.field_b1, self.field_w2, self.field_b2]

    def field_parameters(self):
        return [self.field_w1, self.field_b1, self.field_w2, self.field_b2]

    def initial_state(self, features):
        return as_tensor(features) @ self.zeta_weight + self.zeta_bias

    def __call__(self, p):
        hidden = tanh(p @ self.field_w1 + self.field_b1)
        out = tanh(hidden @ self.field_w2 + self.field_b2)
        return reshape(out, p.shape[:-1] + (self.hidden_width, self.channels))


# -- RK4 solver ------------------------------------------------------------

def _guard(p):
    if not np.all(np.isfinite(p.data)) or np.any(np.abs(p.data) > DIVERGENCE_LIMIT):
        raise NonFiniteState("CDE hidden state diverged")


def cde_solve(field, path, p0, query_times, substeps=4):
    """Integrate dp = field(p) dD with fixed-step RK4 along ``path``.

    Integration starts at the path's first knot from ``p0`` and takes
    ``substeps`` equal steps across every interval between consecutive
    query times.  Returns a tensor of shape ``S + (q, w)``.
    """
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    p = as_tensor(p0)
    q = np.asarray(query_times, dtype=np.float64)
    shape = path.batch_shape
    q = np.broadcast_to(q, shape + q.shape[-1:])
    if np.any(np.diff(q, axis=-1) < 0) or np.any(q[..., 0] < path.start - 1e-12):
        raise ValueError("query times must be increasing and start at or after the first knot")

    def rate(state, s):
        dd = spline_derivative(path, s)
        return reshape(field(state) @ Tensor(dd[..., None]), state.shape)

    t_cur = np.array(path.start, dtype=np.float64)
    states = []
    for j in range(q.shape[-1]):
        target = q[..., j]
        h = (target - t_cur) / substeps
        if np.any(h != 0):
            hh = Tensor(h[..., None])
            for k in range(substeps):
                s = t_cur + k * h
                k1 = rate(p, s)
                k2 = rate(p + k1 * (hh * 0.5), s + 0.5 * h)
                k3 = rate(p + k2 * (hh * 0.5), s + 0.5 * h)
                k4 = rate(p + k3 * hh, s + h)
                p = p + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (hh / 6.0)
                _guard(p)
        t_cur = target
        states.append(p)
    return stack(states, axis=-2)


# -- the positional embedding ----------------------------------------------

def ncde_pe_forward(params, times, features, substeps=4):
    """Hidden state at every observation of each window: ``(B, T, w)``."""
    times = np.asarray(times, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if times.shape[-1] < 2:
        raise TooFewKnots("a window needs at least 2 observations")
    path = natural_cubic_spline(times, features)
    p0 = params.initial_state(features[..., 0, :])
    return cde_solve(params, path, p0, times, substeps)


def time_control_path(span, channels=N_TIME_FEATURES, reference=None):
    """Straight control path moving only the relative-time channel.

    The remaining channels are held at ``reference`` (zeros if omitted).
    """
    t0, t1 = float(span[0]), float(span[1])
    if t1 <= t0:
        t1 = t0 + 1.0
    values = np.zeros((2, channels))
    if reference is not None:
        values[:, 1:] = np.asarray(reference, dtype=np.float64)[1:channels]
    values[:, 0] = (t0, t1)
    return natural_cubic_spline(np.array([t0, t1]), values)


@dataclass(frozen=True)
class PETable:
    grid_times: np.ndarray
    grid_values: np.ndarray
    resolution: float

    @property
    def span(self):
        return float(self.grid_times[0]), float(self.grid_times[-1])


def pe_table_build(params, span, resolution, substeps=4, reference=None):
    """Evaluate the embedding along the time-only control path on a uniform grid."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    t0, t1 = float(span[0]), float(span[1])
    if t1 < t0:
        raise ValueError("span end precedes span start")
    count = int(np.floor((t1 - t0) / resolution + 1e-9)) + 1
    grid = t0 + resolution * np.arange(count)
    path = time_control_path((t0, t1), params.channels, reference)
    p0 = params.initial_state(spline_eval(path, t0))
    values = cde_solve(params, path, p0, grid, substeps).data
    return PETable(grid_times=grid, grid_values=values, resolution=float(resolution))


def pe_table_lookup(table, t):
    """Linear interpolation between bracketing grid rows, clamped at the ends."""
    t = np.asarray(t, dtype=np.float64)
    grid, vals = table.grid_times, table.grid_values
    if grid.size == 1:
        return np.broadcast_to(vals[0], t.shape + vals.shape[-1:]).copy()
    pos = np.clip((t - grid[0]) / table.resolution, 0.0, grid.size - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), grid.size - 2)
    frac = (pos - lo)[..., None]
    return vals[lo] * (1.0 - frac) + vals[lo + 1] * frac


def save_table(table, path):
    t0, t1 = table.span
    w = table.grid_values.shape[-1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{TABLE_HEADER} {table.resolution:.17g} {t0:.17g} {t1:.17g} {w}\n")
        for t, row in zip(table.grid_times, table.grid_values):
            fh.write(" ".join(f"{v:.17g}" for v in (t, *row)) + "\n")


def load_table(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 6 or " ".join(header[:2]) != TABLE_HEADER:
            raise ParseError("not a PE table file", 1)
        resolution, w = float(header[2]), int(header[5])
        rows = [list(map(float, line.split())) for line in fh if line.strip()]
    data = np.asarray(rows, dtype=np.float64).reshape(-1, w + 1)
    return PETable(grid_times=data[:, 0], grid_values=data[:, 1:], resolution=resolution)


class NCDEEmbedding(PositionalEmbedding):
    """Hidden states of a neural CDE driven by the window's time-feature spline.

    After :meth:`freeze` the embedding reads from a precomputed table keyed
    by window-relative time and exposes no trainable parameters.
    """

    method = "ncde"

    def __init__(self, d_model, rng, substeps=4, field_hidden=64, train_mode="single_epoch", table_resolution=None):
        super().__init__(d_model)
        self.params = NCDEParams(d_model, rng, field_hidden=field_hidden)
        self.substeps = int(substeps)
        self.train_mode = train_mode
        self.table_resolution = table_resolution
        self.table = None
        # non-time channels of the canonical control path
        self.reference = window_time_features(np.array([REFERENCE_EPOCH]), REFERENCE_EPOCH, REFERENCE_EPOCH + 1.0)[0]

    @property
    def frozen(self):
        return self.table is not None

    def parameters(self):
        return [] if self.frozen else self.params.parameters()

    def forward(self, ctx):
        if self.frozen:
            return Tensor(pe_table_lookup(self.table, ctx.rel_time))
        return ncde_pe_forward(self.params, ctx.rel_time, ctx.features, self.substeps)

    def set_reference(self, windows):
        """Hold the canonical path's calendar channels at the windows' mean start features."""
        if windows:
            self.reference = np.mean([w.past_features[0] for w in windows], axis=0)
        return self.reference

    def freeze(self, resolution=None, span=(0.0, 1.0)):
        resolution = resolution or self.table_resolution or 0.01
        self.table = pe_table_build(self.params, span, resolution, self.substeps, self.reference)
        return self.table

    def embed_times(self, times):
        """Embedding along the time-only control path started at t = 0."""
        times = np.asarray(times, dtype=np.float64)
        if np.any(times < 0):
            raise ValueError("NCDE embedding is integrated forward from t = 0")
        if self.frozen:
            return pe_table_lookup(self.table, times)
        order = np.argsort(times, kind="stable")
        path = time_control_path((0.0, max(1.0, float(times.max()))), self.params.channels, self.reference)
        p0 = self.params.initial_state(spline_eval(path, 0.0))
        states = cde_solve(self.params, path, p0, times[order], self.substeps).data
        out = np.empty_like(states)
        out[order] = states
        return out
