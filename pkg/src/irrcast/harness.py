"""Experiment sweeps, aggregation, probes and report files."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import yaml
from scipy.stats import spearmanr
from sklearn.preprocessing import StandardScaler

from . import autodiff as ad
from .data import IrregularSeries, drop_random, load_csv, split_chronological, split_windows, synth_generate
from .embeddings import (
    METHODS,
    PEContext,
    PEMethodConfig,
    check_monotonicity,
    largest_period,
    make_pe,
    pairwise_distances,
)
from .errors import BadParams, EmptyCell, IrrcastError, TooFewSamples
from .model import Forecaster, ModelConfig, TrainingConfig, evaluate, train
from .ncde import NCDEEmbedding, pe_table_lookup

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


# -- configuration ---------------------------------------------------------

@dataclass
class DatasetSpec:
    source: str = "synthetic"
    generator: str = "sine_mixture"
    params: dict = field(default_factory=lambda: {"n_vars": 3})
    length: int = 2000
    seed: int = 0
    path: str | None = None
    columns: list | None = None

    def load(self):
        if self.source == "csv":
            if not self.path:
                raise BadParams("csv dataset needs a path")
            return load_csv(self.path, self.columns)
        if self.source != "synthetic":
            raise BadParams(f"unknown dataset source {self.source!r}")
        return synth_generate(self.generator, self.params, self.length, self.seed)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    lookback: int = 48
    horizons: list = field(default_factory=lambda: [24, 48])
    missing_rates: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    pe_methods: list = field(default_factory=lambda: list(METHODS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fractions: tuple = DEFAULT_FRACTIONS
    stride: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.training, dict):
            self.training = TrainingConfig(**self.training)
        self.horizons = [int(h) for h in np.atleast_1d(self.horizons)]
        self.missing_rates = [float(r) for r in np.atleast_1d(self.missing_rates)]
        self.seeds = [int(s) for s in np.atleast_1d(self.seeds)]
        self.pe_methods = [PEMethodConfig.from_value(m, d_model=self.model.d_model) for m in self.pe_methods]
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.seeds:
            raise BadParams("seeds must be nonempty")
        if not self.pe_methods or not self.horizons or not self.missing_rates:
            raise BadParams("pe_methods, horizons and missing_rates must be nonempty")
        if any(not 0.0 <= r < 1.0 for r in self.missing_rates):
            raise BadParams("missing rates must lie in [0, 1)")
        if self.lookback < 1 or any(h < 1 for h in self.horizons):
            raise BadParams("window sizes must be positive")

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise BadParams(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def cells(self):
        return [
            (h, r, m, s)
            for h in self.horizons
            for r in self.missing_rates
            for m in self.pe_methods
            for s in self.seeds
        ]


# -- result rows -----------------------------------------------------------

@dataclass
class ResultRow:
    pe_method: str
    missing_rate: float
    prediction_length: int
    seed: int
    split: str = "test"
    mse: float = math.nan
    mae: float = math.nan
    epochs: int = 0
    wall_time_seconds: float = 0.0
    error: str = ""

    @property
    def key(self):
        return (self.prediction_length, self.missing_rate, self.pe_method, self.seed)

    @property
    def ok(self):
        return not self.error


RESULT_FIELDS = [f.name for f in fields(ResultRow)]
CURVE_FIELDS = ["pe_method", "missing_rate", "prediction_length", "seed", "epoch", "train_loss", "val_mse", "val_mae"]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _row_values(row):
    return [_fmt(getattr(row, name)) for name in RESULT_FIELDS]


def read_results(path):
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                ResultRow(
                    pe_method=rec["pe_method"],
                    missing_rate=float(rec["missing_rate"]),
                    prediction_length=int(rec["prediction_length"]),
                    seed=int(rec["seed"]),
                    split=rec["split"],
                    mse=float(rec["mse"]),
                    mae=float(rec["mae"]),
                    epochs=int(rec["epochs"]),
                    wall_time_seconds=float(rec["wall_time_seconds"]),
                    error=rec["error"],
                )
            )
    return rows


def write_results(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_FIELDS)
        for row in rows:
            writer.writerow(_row_values(row))


# -- one sweep cell --------------------------------------------------------

@dataclass
class CellData:
    train: list
    val: list
    test: list
    base_interval: float
    median_gap: float
    table_size: int


def prepare_cell_data(series, config, horizon, missing_rate, seed):
    """Irregularize, standardize on training statistics, and window."""
    dropped = drop_random(series, missing_rate, seed)
    train_part, _, _ = split_chronological(dropped, config.fractions)
    scaler = StandardScaler().fit(train_part.values)
    scaled = IrregularSeries(dropped.timestamps, scaler.transform(dropped.values), dropped.variable_names)
    windows = split_windows(scaled, config.fractions, config.lookback, horizon, config.stride)
    base = series.base_interval()
    spans = [w.times[-1] - w.times[0] for split in windows for w in split]
    if not spans:
        raise IrrcastError(f"series too short for a {config.lookback}+{horizon} window")
    return CellData(
        *windows,
        base_interval=base,
        median_gap=float(np.median(np.diff(train_part.timestamps))) / base,
        table_size=int(math.ceil(max(spans) / base)) + 2,
    )


def build_model(config, method, n_vars, horizon, seed, data):
    model_cfg = replace(config.model, pe=method)
    pe = method
    if pe.method == "simple" and pe.grid_resolution:
        table = int(math.ceil(data.table_size / pe.grid_resolution)) + 1
    else:
        table = data.table_size
    return Forecaster(
        model_cfg,
        n_vars,
        config.lookback,
        horizon,
        seed=seed,
        base_interval=data.base_interval,
        pe_table_size=table,
        median_gap=data.median_gap,
    )


def run_cell(config, series, cell):
    horizon, rate, method, seed = cell
    start = time.perf_counter()
    row = ResultRow(pe_method=method.method, missing_rate=rate, prediction_length=horizon, seed=seed)
    curve = []
    try:
        data = prepare_cell_data(series, config, horizon, rate, seed)
        model = build_model(config, method, series.n_vars, horizon, seed, data)
        log_ = train(model, data.train, data.val, replace(config.training, seed=seed))
        row.mse, row.mae = evaluate(model, data.test)
        row.epochs = len(log_.epochs)
        curve = [
            [method.method, rate, horizon, seed, e["epoch"], e["train_loss"], e["val_mse"], e["val_mae"]]
            for e in log_.epochs
        ]
    except (IrrcastError, ValueError, FloatingPointError) as exc:
        row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        log.warning("cell %s failed: %s", row.key, row.error)
    row.wall_time_seconds = time.perf_counter() - start
    return row, curve


def _completed_keys(path):
    if not os.path.exists(path):
        return set(), []
    rows = read_results(path)
    return {r.key for r in rows}, rows


def run_experiment(config, output_dir=None, threads=1, resume=True):
    """Run every (horizon, rate, method, seed) cell; rows are appended as they finish."""
    output_dir = output_dir or config.output_dir
    os.makedirs(os.path.join(output_dir, "plotdata"), exist_ok=True)
    results_path = os.path.join(output_dir, "results.csv")
    curves_path = os.path.join(output_dir, "plotdata", "training_curves.csv")
    done, previous = _completed_keys(results_path) if resume else (set(), [])
    if not resume or not previous:
        write_results([], results_path)
        with open(curves_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CURVE_FIELDS)
    series = config.dataset.load()
    pending = [
        c for c in config.cells() if (c[0], c[1], c[2].method, c[3]) not in done
    ]
    rows = list(previous)
    with (
        open(results_path, "a", encoding="utf-8", newline="") as res_fh,
        open(curves_path, "a", encoding="utf-8", newline="") as curve_fh,
        ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool,
    ):
        res_writer = csv.writer(res_fh, lineterminator="\n")
        curve_writer = csv.writer(curve_fh, lineterminator="\n")
        for row, curve in pool.map(lambda c: run_cell(config, series, c), pending):
            res_writer.writerow(_row_values(row))
            res_fh.flush()
            curve_writer.writerows([[_fmt(v) for v in rec] for rec in curve])
            curve_fh.flush()
            rows.append(row)
            log.info("cell %s: mse %.4f mae %.4f", row.key, row.mse, row.mae)
    return rows


# -- aggregation -----------------------------------------------------------

@dataclass
class CellSummary:
    pe_method: str
    missing_rate: float
    prediction_length: int
    n: int
    mse_mean: float
    mse_std: float
    mae_mean: float
    mae_std: float


SUMMARY_FIELDS = [f.name for f in fields(CellSummary)]


def aggregate(rows, skip_empty=False):
    """Mean and population std of MSE/MAE per (method, rate, length) cell.

    Error rows are ignored; a cell with no successful row raises
    :class:`EmptyCell` unless ``skip_empty``.
    """
    groups = {}
    for row in rows:
        groups.setdefault((row.pe_method, row.missing_rate, row.prediction_length), []).append(row)
    out = []
    for (method, rate, length), members in groups.items():
        good = [r for r in members if r.ok]
        if not good:
            if skip_empty:
                continue
            raise EmptyCell(f"no successful runs for {method} at rate {rate}, length {length}")
        mse = np.array([r.mse for r in good])
        mae = np.array([r.mae for r in good])
        out.append(
            CellSummary(method, rate, length, len(good), float(mse.mean()), float(mse.std()), float(mae.mean()), float(mae.std()))
        )
    return out


# -- probes ----------------------------------------------------------------

@dataclass
class LinearityReport:
    r2: np.ndarray
    median: float
    slopes: np.ndarray

    @property
    def mostly_linear(self):
        return self.median > 0.8


def _embed_fn(embedding):
    if isinstance(embedding, NCDEEmbedding):
        return embedding.embed_times
    if hasattr(embedding, "grid_values"):
        return lambda t: pe_table_lookup(embedding, t)
    if hasattr(embedding, "embed_times"):
        return embedding.embed_times
    return embedding


def linearity_probe(embedding, probe_times):
    """Least-squares line per embedding dimension; returns R² per dimension."""
    t = np.asarray(probe_times, dtype=np.float64)
    if t.size < 3:
        raise TooFewSamples("linearity probe needs at least three times")
    y = np.asarray(_embed_fn(embedding)(t), dtype=np.float64)
    design = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_res = (resid**2).sum(0)
    ss_tot = ((y - y.mean(0)) ** 2).sum(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, 1.0)
    return LinearityReport(r2=r2, median=float(np.median(r2)), slopes=coef[0])


@dataclass
class DistanceGapReport:
    gaps: np.ndarray
    distances: np.ndarray
    spearman: float
    error: str = ""


def distance_gap_report(pe, times):
    """All pairwise (|dt|, embedding distance) pairs and their Spearman correlation."""
    t = np.asarray(times, dtype=np.float64)
    if t.size < 3:
        raise TooFewSamples("distance-gap report needs at least three times")
    rows = np.asarray(_embed_fn(pe)(t), dtype=np.float64)
    iu = np.triu_indices(t.size, k=1)
    gaps = np.abs(t[:, None] - t[None, :])[iu]
    dist = pairwise_distances(rows)[iu]
    if np.ptp(dist) == 0 or np.ptp(gaps) == 0:
        return DistanceGapReport(gaps, dist, math.nan, "undefined correlation: constant distances or gaps")
    return DistanceGapReport(gaps, dist, float(spearmanr(gaps, dist).statistic))


# -- property suite --------------------------------------------------------

PROPERTIES = (
    "monotonicity",
    "translation_invariance",
    "symmetry",
    "inductive",
    "data_driven",
    "irregularity_adaptable",
)


@dataclass
class PropertyResult:
    method: str
    prop: str
    status: str  # pass | fail | n/a
    detail: str = ""


def _property_domain(pe):
    if pe.method == "irr_sinusoidal":
        return 10.0 * largest_period(pe.d_model, pe.time_scale)
    if pe.method == "simple":
        return 0.9 * pe.table.shape[0] * pe.grid_resolution
    return 1.0


def _joint(pe_fn):
    return lambda a, b: np.split(np.asarray(pe_fn(np.concatenate([a, b]))), 2)


def run_property_suite(methods=METHODS, seed=0, d_model=32, n_times=24, window_length=72, table_size=80):
    """Pass/fail matrix of the six positional-embedding properties."""
    results = []
    for spec in methods:
        spec = PEMethodConfig.from_value(spec, d_model=d_model)
        rng = np.random.default_rng(seed)
        pe = make_pe(spec, rng, window_length=window_length, table_size=table_size, median_gap=1.0)
        name = spec.method
        span = _property_domain(pe)
        times = np.sort(rng.uniform(0.0, span, size=n_times))
        for prop in PROPERTIES:
            try:
                status, detail = _PROPERTY_CHECKS[prop](pe, times, span, rng)
            except (IrrcastError, ValueError) as exc:
                status, detail = "fail", f"{type(exc).__name__}: {exc}"
            results.append(PropertyResult(name, prop, status, detail))
    return results


def _check_monotone(pe, times, span, rng):
    report = check_monotonicity(pe.embed_times, times)
    if report.passed:
        return "pass", f"0 of {report.comparable} triples"
    return "fail", f"{report.violations} violating triples, e.g. {report.witnesses[0]}"


def _check_translation(pe, times, span, rng):
    lag = 0.25 * span
    base = times * 0.5
    here, there = _joint(pe.embed_times)(base, base + lag)
    d = np.sqrt(((here - there) ** 2).sum(-1))
    dev = float(np.max(np.abs(d - d[0])))
    return ("pass" if dev < 1e-9 else "fail"), f"max deviation {dev:.3g}"


def _check_symmetry(pe, times, span, rng):
    dist = pairwise_distances(pe.embed_times(times))
    dev = float(np.max(np.abs(dist - dist.T)))
    return ("pass" if dev < 1e-12 else "fail"), f"max asymmetry {dev:.3g}"


def _check_inductive(pe, times, span, rng):
    far = np.sort(span * (3.0 + rng.uniform(0.0, 1.0, size=5)))
    rows = np.asarray(pe.embed_times(far))
    if not np.all(np.isfinite(rows)):
        return "fail", "non-finite embedding beyond the training range"
    return "pass", f"finite at t up to {far[-1]:.4g}"


def _check_data_driven(pe, times, span, rng):
    params = pe.parameters()
    if not params:
        return "fail", "no learnable parameters"
    ctx = PEContext.from_times(times / span)
    out = pe(ctx)
    target = rng.normal(size=out.shape)
    loss = ((out - target) * (out - target)).mean()
    ad.backward(loss, params=params)
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    for p in params:
        p.zero_grad()
    return ("pass" if norm > 0 else "fail"), f"gradient norm {norm:.3g}"


def _check_irregular(pe, times, span, rng):
    n = 8
    regular = np.linspace(0.0, 0.5 * span, n)
    jitter = np.sort(rng.uniform(0.0, 0.5 * span, size=n))
    jitter[0] = 0.0
    a = np.asarray(pe.embed_times(regular))
    b = np.asarray(pe.embed_times(jitter))
    diff = float(np.max(np.abs(a - b)))
    if diff < 1e-12:
        return "fail", "embedding ignores timestamps (same order gives same rows)"
    return "pass", f"responds to gaps (max change {diff:.3g})"


_PROPERTY_CHECKS = {
    "monotonicity": _check_monotone,
    "translation_invariance": _check_translation,
    "symmetry": _check_symmetry,
    "inductive": _check_inductive,
    "data_driven": _check_data_driven,
    "irregularity_adaptable": _check_irregular,
}


def property_matrix(results):
    """{method: {property: status}}"""
    matrix = {}
    for r in results:
        matrix.setdefault(r.method, {})[r.prop] = r.status
    return matrix


# -- reports ---------------------------------------------------------------

def emit_report(rows, aggregates, path, plotdata=None):
    """Write results.csv, summary.csv and any ``plotdata`` tables under ``path``.

    ``plotdata`` maps a file stem to ``(header, rows)``.
    """
    os.makedirs(os.path.join(path, "plotdata"), exist_ok=True)
    write_results(rows, os.path.join(path, "results.csv"))
    with open(os.path.join(path, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        for agg in aggregates:
            writer.writerow([_fmt(v) for v in asdict(agg).values()])
    written = []
    for stem, (header, records) in (plotdata or {}).items():
        target = os.path.join(path, "plotdata", f"{stem}.csv")
        write_table(target, header, records)
        written.append(target)
    return written


def write_table(path, header, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in rec] for rec in records])


def distance_gap_table(report):
    return ["gap", "distance"], list(zip(report.gaps.tolist(), report.distances.tolist()))


def linearity_table(report):
    return ["dimension", "r2", "slope"], [
        (i, float(r), float(s)) for i, (r, s) in enumerate(zip(report.r2, report.slopes))
    ]
