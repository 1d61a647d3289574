"""Command-line entry point: ``iotab <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 solver failure. ``IOTAB_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from . import pipeline as pl
from .augmentation import combine_regions, generate_specs, write_augmented
from .balancing import SolverConfig, SolverError, balance_detailed
from .features import load_pipeline, save_pipeline
from .table_model import DataError, infer_dims, load_io_table, load_region_dataset, write_io_table

EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 2, 3, 4

log = logging.getLogger("iotab")


def _config(args) -> pl.PipelineConfig:
    overrides = {"seed": args.seed, "jobs": args.jobs, "out": args.out}
    if args.config:
        return pl.load_config(args.config, **overrides)
    return pl.parse_config("", **overrides)


def _need(cfg, *keys):
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise pl.ConfigError(f"missing config keys: {', '.join(missing)}")


def cmd_augment(args) -> int:
    cfg = _config(args)
    _need(cfg, "dataset", "target_region")
    dataset = load_region_dataset(cfg.dataset)
    ds = pl.training_dataset(dataset, cfg.target_region)
    specs, is_train = generate_specs(ds, cfg.augmentation(dataset))
    regions = [combine_regions(ds, s) for s in specs]
    write_augmented(Path(cfg.out) / "augmented", specs, is_train, regions)
    print(f"wrote {len(specs)} samples to {Path(cfg.out) / 'augmented'}")
    return 0


def _augmented(cfg):
    _need(cfg, "dataset", "target_region")
    dataset = load_region_dataset(cfg.dataset)
    # augmentation is a pure function of (dataset, config, seed), so later
    # stages regenerate it instead of re-reading the sample files
    return dataset, pl.stage_augment(cfg, dataset)


def cmd_fit_pipeline(args) -> int:
    cfg = _config(args)
    dataset, aug = _augmented(cfg)
    pipe = pl.stage_fit_pipeline(cfg, dataset, aug)
    save_pipeline(pipe, Path(cfg.out) / "pipeline")
    print(f"pipeline {pipe.ref} with {pipe.pca.n_components} components")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset, aug = _augmented(cfg)
    pipe = load_pipeline(Path(cfg.out) / "pipeline")
    models = pl.stage_train(cfg, dataset, aug, pipe)
    pl.save_models(models, Path(cfg.out) / "models")
    print(f"trained {len(models)} item models")
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    _need(cfg, "dataset", "target_region")
    cfg.total_output = args.total_output
    if not cfg.total_output > 0:
        raise pl.ConfigError("total output must be given and positive (--total-output)")
    dataset = load_region_dataset(cfg.dataset)
    out = Path(cfg.out)
    pipe = load_pipeline(out / "pipeline")
    models = pl.load_models(out / "models", dataset.dims)
    raw, y_star = pl.stage_predict(cfg, dataset, models, pipe, cfg.total_output)
    write_io_table(raw, out / "raw_estimate.csv")
    pl.write_gross_outputs(y_star, out / "gross_outputs_predicted.csv")
    print(f"wrote {out / 'raw_estimate.csv'}")
    return 0


def cmd_balance(args) -> int:
    dims = infer_dims(args.table)
    table = load_io_table(args.table, dims)
    Y = pl.read_gross_outputs(args.gross_outputs)
    total = args.total if args.total is not None else math.fsum(Y)
    cfg = SolverConfig(residual_tol=args.tol)
    balanced, bt, _ = balance_detailed(table, Y, total, cfg, not args.no_phi)
    out = Path(args.output)
    write_io_table(balanced, out)
    pl.write_balance_report(bt, out.parent / "balance_report.csv")
    print(f"balanced in {bt.iterations} iterations, max residual {bt.max_residual:.3e}")
    return 0


def cmd_evaluate(args) -> int:
    dims = infer_dims(args.actual)
    est = load_io_table(args.estimate, dims)
    act = load_io_table(args.actual, dims)
    report = pl.evaluate_to_dir(est, act, args.out, args.figures, args.bin_width)
    print(f"STPE {report['All']['STPE']:.6f}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    manifest = pl.run_pipeline(cfg)
    print(f"estimate written to {Path(cfg.out) / 'estimate.csv'} "
          f"(max residual {manifest.balance['max_residual']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iotab", description="Regional input-output table estimation")
    sub = p.add_subparsers(dest="command", required=True)

    def staged(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--out")
        sp.set_defaults(func=fn)
        return sp

    staged("augment", cmd_augment, "generate virtual regions")
    staged("fit-pipeline", cmd_fit_pipeline, "fit standardizer and PCA on training samples")
    staged("train", cmd_train, "train one model per table item")
    sp = staged("predict", cmd_predict, "predict the target region's raw table")
    sp.add_argument("--total-output", type=float, required=True)
    staged("pipeline", cmd_pipeline, "run every stage end to end")

    sp = sub.add_parser("balance", help="balance a table to given gross outputs")
    sp.add_argument("--table", required=True)
    sp.add_argument("--gross-outputs", required=True)
    sp.add_argument("--total", type=float, help="total output (default: sum of gross outputs)")
    sp.add_argument("--no-phi", action="store_true", help="drop the phi constraint")
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--output", default="balanced.csv")
    sp.set_defaults(func=cmd_balance)

    sp = sub.add_parser("evaluate", help="compare an estimate with the actual table")
    sp.add_argument("--estimate", required=True)
    sp.add_argument("--actual", required=True)
    sp.add_argument("--out", default="evaluation")
    sp.add_argument("--figures", choices=("svg", "png", "none"), default="svg")
    sp.add_argument("--bin-width", type=float, default=20.0)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    level = os.environ.get("IOTAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code(exc.cause) or 1
    except Exception as exc:
        code = _code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


def _code(exc):
    if isinstance(exc, pl.ConfigError):
        return EXIT_USAGE
    if isinstance(exc, SolverError):
        return EXIT_SOLVER
    if isinstance(exc, (DataError, ValueError, OSError)):
        return EXIT_DATA
    return None


if __name__ == "__main__":
    sys.exit(main())
