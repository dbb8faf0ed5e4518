"""``irrcast`` command line."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .embeddings import METHODS, PEMethodConfig, check_monotonicity, largest_period, make_pe
from .harness import (
    CURVE_FIELDS,
    PROPERTIES,
    ExperimentConfig,
    aggregate,
    build_model,
    distance_gap_report,
    distance_gap_table,
    emit_report,
    linearity_probe,
    linearity_table,
    prepare_cell_data,
    read_results,
    run_experiment,
    run_property_suite,
    write_table,
)
from .model import TrainingConfig, evaluate, load_checkpoint, save_checkpoint, train

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _load_config(args):
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seeds = [args.seed]
    if args.out:
        config.output_dir = args.out
    return config


def _method(config, name):
    if name is None:
        return config.pe_methods[0]
    for m in config.pe_methods:
        if m.method == name:
            return m
    return PEMethodConfig.from_value(name, d_model=config.model.d_model)


def _cell_args(config, args):
    horizon = config.horizons[0] if args.horizon is None else args.horizon
    rate = config.missing_rates[0] if args.rate is None else args.rate
    return horizon, rate, _method(config, args.method), config.seeds[0]


def cmd_train(args, config):
    horizon, rate, method, seed = _cell_args(config, args)
    series = config.dataset.load()
    data = prepare_cell_data(series, config, horizon, rate, seed)
    model = build_model(config, method, series.n_vars, horizon, seed, data)
    log_ = train(model, data.train, data.val, replace(config.training, seed=seed))
    mse, mae = evaluate(model, data.test)
    os.makedirs(os.path.join(config.output_dir, "plotdata"), exist_ok=True)
    ckpt = os.path.join(config.output_dir, "model.ckpt")
    save_checkpoint(model, ckpt, extras={"horizon": horizon, "missing_rate": rate, "seed": seed})
    write_table(
        os.path.join(config.output_dir, "plotdata", "training_curves.csv"),
        CURVE_FIELDS,
        [[method.method, rate, horizon, seed, e["epoch"], e["train_loss"], e["val_mse"], e["val_mae"]] for e in log_.epochs],
    )
    print(f"{method.method} rate={rate} horizon={horizon} seed={seed}: test mse={mse:.6f} mae={mae:.6f}")
    print(f"checkpoint written to {ckpt}")


def cmd_eval(args, config):
    model = load_checkpoint(args.checkpoint)
    extras = model.extras
    horizon = extras.get("horizon", model.horizon)
    rate = extras.get("missing_rate", 0.0)
    seed = extras.get("seed", config.seeds[0])
    if horizon != model.horizon or config.lookback != model.lookback:
        raise ValueError("checkpoint window sizes do not match the config")
    data = prepare_cell_data(config.dataset.load(), config, horizon, rate, seed)
    mse, mae = evaluate(model, data.test)
    print(f"{model.config.pe.method} rate={rate} horizon={horizon} seed={seed}: test mse={mse:.6f} mae={mae:.6f}")


def _print_summary(summary):
    print(f"{'method':16s} {'rate':>5s} {'len':>4s} {'n':>2s} {'mse':>17s} {'mae':>17s}")
    for s in summary:
        print(
            f"{s.pe_method:16s} {s.missing_rate:5.2f} {s.prediction_length:4d} {s.n:2d} "
            f"{s.mse_mean:8.4f}±{s.mse_std:7.4f} {s.mae_mean:8.4f}±{s.mae_std:7.4f}"
        )


def cmd_sweep(args, config):
    rows = run_experiment(config, config.output_dir, threads=args.threads, resume=not args.no_resume)
    summary = aggregate(rows, skip_empty=True)
    emit_report(rows, summary, config.output_dir)
    failed = sum(1 for r in rows if not r.ok)
    _print_summary(summary)
    print(f"{len(rows)} cells, {failed} failed; results in {config.output_dir}")


def cmd_report(args, config):
    path = os.path.join(config.output_dir, "results.csv")
    rows = read_results(path)
    summary = aggregate(rows, skip_empty=True)
    emit_report(rows, summary, config.output_dir)
    _print_summary(summary)


def cmd_probe(args, config):
    horizon = config.horizons[0]
    rate = args.rate if args.rate is not None else config.missing_rates[0]
    seed = config.seeds[0]
    series = config.dataset.load()
    data = prepare_cell_data(series, config, horizon, rate, seed)
    method = PEMethodConfig.from_value({"method": "ncde", "train_mode": "single_epoch"}, d_model=config.model.d_model)
    model = build_model(config, method, series.n_vars, horizon, seed, data)
    log_ = train(model, data.train, [], TrainingConfig(epochs=1, batch_size=config.training.batch_size, seed=seed))
    report = linearity_probe(model.pe, np.linspace(0.0, 1.0, args.points))
    os.makedirs(os.path.join(config.output_dir, "plotdata"), exist_ok=True)
    write_table(os.path.join(config.output_dir, "plotdata", "linearity.csv"), *linearity_table(report))
    ncde = log_.ncde
    print(f"NCDE epoch: first batch loss {ncde['first_loss']:.4f}, last {ncde['last_loss']:.4f}")
    print(f"per-dimension R2 median {report.median:.4f}; min {report.r2.min():.4f}; max {report.r2.max():.4f}")
    print(f"median R2 > 0.8: {'yes' if report.mostly_linear else 'no'}")


def cmd_distgap(args, config):
    d = config.model.d_model
    rng = np.random.default_rng(config.seeds[0])
    span = args.span_periods * largest_period(d, 1.0)
    times = np.sort(rng.uniform(0.0, span, size=args.points))
    os.makedirs(os.path.join(config.output_dir, "plotdata"), exist_ok=True)
    for name in args.methods:
        pe = make_pe(PEMethodConfig(method=name, d_model=d, time_scale=1.0), np.random.default_rng(config.seeds[0]))
        report = distance_gap_report(pe, times)
        mono = check_monotonicity(pe.embed_times, times)
        write_table(os.path.join(config.output_dir, "plotdata", f"distgap_{name}.csv"), *distance_gap_table(report))
        corr = "undefined" if report.error else f"{report.spearman:.6f}"
        print(f"{name:16s} spearman={corr} monotonicity violations={mono.violations}/{mono.comparable}")


def cmd_proptest(args, config):
    methods = args.methods or list(METHODS)
    results = run_property_suite(methods, seed=config.seeds[0], d_model=config.model.d_model)
    os.makedirs(config.output_dir, exist_ok=True)
    write_table(
        os.path.join(config.output_dir, "property_matrix.csv"),
        ["method", "property", "status", "detail"],
        [(r.method, r.prop, r.status, r.detail) for r in results],
    )
    header = " ".join(f"{p[:12]:>12s}" for p in PROPERTIES)
    print(f"{'method':16s} {header}")
    table = {}
    for r in results:
        table.setdefault(r.method, []).append(r.status)
    for method, statuses in table.items():
        print(f"{method:16s} " + " ".join(f"{s:>12s}" for s in statuses))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="run a single seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for sweeps")

    parser = argparse.ArgumentParser(prog="irrcast", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one configuration and save a checkpoint")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--rate", type=float)
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="run the full experiment grid")
    p.add_argument("--no-resume", action="store_true", help="start over instead of skipping finished cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", parents=[common], help="NCDE linearity probe after one training epoch")
    p.add_argument("--rate", type=float)
    p.add_argument("--points", type=int, default=101)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("distgap", parents=[common], help="embedding distance versus time gap")
    p.add_argument("--methods", nargs="+", default=["ctlpe", "irr_sinusoidal"], choices=METHODS)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--span-periods", type=float, default=10.0)
    p.set_defaults(func=cmd_distgap)

    p = sub.add_parser("proptest", parents=[common], help="positional-embedding property matrix")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.set_defaults(func=cmd_proptest)

    p = sub.add_parser("report", parents=[common], help="aggregate an existing results.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("threads", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    level = os.environ.get("IRRCAST_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load_config(args)
        args.func(args, config)
    except KeyboardInterrupt:
        print("irrcast: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line diagnostic for any failure
        print(f"irrcast: error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
