"""End-to-end estimation: augment, fit features, train per item, predict,
renormalise gross outputs, balance and evaluate."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import plotting
from .augmentation import (AugmentationConfig, FixedScale, UniformScale, combine_regions, generate_specs,
                           write_augmented)
from .balancing import SolverConfig, balance_detailed
from .features import FeaturePipeline, default_recipe, fit_pipeline, load_recipe, save_pipeline
from .metrics import diff_heatmaps, error_rate_histogram, write_evaluation
from .neural import NetworkConfig, TrainedItemModel, load_item_model, predict_item, save_item_model, train_item
from .table_model import DataError, IOTable, RegionDataset, load_io_table, load_region_dataset, write_io_table
from .targets import ItemAddress, item_addresses, renormalize_gross_outputs, table_from_ratios, target_matrix

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    dataset: str = ""
    out: str = "out"
    target_region: str = ""
    total_output: float = math.nan
    actual_table: str = ""
    mode: str = "ours"  # or "baseline"
    prior_table: str = ""
    gross_outputs: str = ""
    recipe: str = ""
    seed: int = 0
    jobs: int = 1
    # augmentation
    n_samples: int = 50_000
    train_fraction: float = 0.8
    k_min: int = 2
    k_max: int = 5
    scale_mode: str = "fixed"  # or "uniform"
    scale_population: float = math.nan  # fixed mode; defaults to the target's pop15
    scale_lo: float = math.nan
    scale_hi: float = math.nan
    persist_samples: bool = False
    # features
    pca_components: int = 60
    # network
    width: int = 512
    n_blocks: int = 10
    dropout_after: str = "4:9"
    dropout_prob: float = 0.2
    l1_lambda: float = 1e-5
    batch_size: int = 32
    momentum: float = 0.9
    lr_lo: float = 1e-6
    lr_hi: float = 0.01
    lr_step: int = 10
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.2
    # balancing
    residual_tol: float = 1e-10
    max_iterations: int = 200
    use_phi: bool = True
    # reporting
    figures: str = "svg"  # svg, png or none
    bin_width: float = 20.0

    def augmentation(self, dataset: RegionDataset) -> AugmentationConfig:
        if self.scale_mode == "uniform":
            mode = UniformScale(self.scale_lo, self.scale_hi)
        elif self.scale_mode == "fixed":
            pop = self.scale_population
            if math.isnan(pop):
                pop = dataset.by_id(self.target_region).pop15
            mode = FixedScale(pop)
        else:
            raise ConfigError(f"scale_mode must be fixed or uniform, got {self.scale_mode!r}")
        try:
            return AugmentationConfig(self.n_samples, self.train_fraction, self.k_min, self.k_max, mode, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def network(self, input_dim: int) -> NetworkConfig:
        try:
            return NetworkConfig(
                input_dim=input_dim, width=self.width, n_blocks=self.n_blocks,
                dropout_after=tuple(int(k) for k in str(self.dropout_after).split(":") if k),
                dropout_prob=self.dropout_prob, l1_lambda=self.l1_lambda, batch_size=self.batch_size,
                momentum=self.momentum, lr_lo=self.lr_lo, lr_hi=self.lr_hi, lr_step=self.lr_step,
                max_epochs=self.max_epochs, patience=self.patience, val_fraction=self.val_fraction,
                rng_seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def solver(self) -> SolverConfig:
        return SolverConfig(residual_tol=self.residual_tol, max_iterations=self.max_iterations)


def _convert(f, text: str):
    t = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if t == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return text.lower() in ("true", "1", "yes")
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {text!r} as {t}") from None
    return text


def parse_config(text: str, base_dir: Path | None = None, **overrides) -> PipelineConfig:
    """Parse ``key = value`` lines (``#`` starts a comment). Relative paths
    are resolved against ``base_dir``."""
    known = {f.name: f for f in fields(PipelineConfig)}
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _convert(known[key], value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = PipelineConfig(**values)
    if base_dir is not None:
        for key in ("dataset", "out", "actual_table", "prior_table", "gross_outputs", "recipe"):
            v = getattr(cfg, key)
            if v and not Path(v).is_absolute():
                setattr(cfg, key, str(Path(base_dir) / v))
    if cfg.mode not in ("ours", "baseline"):
        raise ConfigError(f"mode must be ours or baseline, got {cfg.mode!r}")
    if cfg.figures not in ("svg", "png", "none"):
        raise ConfigError(f"figures must be svg, png or none, got {cfg.figures!r}")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def load_config(path, **overrides) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError:
        raise ConfigError(f"cannot read config file {path}") from None
    return parse_config(text, path.parent, **overrides)


def write_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            fh.write(f"{f.name} = {v!r}\n" if isinstance(v, float) else f"{f.name} = {v}\n")


def item_seed(global_seed: int, addr: ItemAddress) -> int:
    h = hashlib.sha256(f"{global_seed}:{addr.name}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def read_gross_outputs(path) -> np.ndarray:
    """CSV with header ``industry,gross_output`` (industries 1-based, in order)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["industry", "gross_output"]:
            raise DataError(f"{path}:1: expected header industry,gross_output")
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), float(row[1])))
            except (ValueError, IndexError):
                raise DataError(f"{path}:{n}: malformed row") from None
    if [i for i, _ in rows] != list(range(1, len(rows) + 1)):
        raise DataError(f"{path}: industries must be listed as 1..K in order")
    return np.array([v for _, v in rows])


def write_gross_outputs(values, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["industry", "gross_output"])
        for i, v in enumerate(values, start=1):
            w.writerow([i, repr(float(v))])


# -- stages ---------------------------------------------------------------------

@dataclass
class AugmentedData:
    train: list
    test: list
    specs: list
    is_train: np.ndarray


def training_dataset(dataset: RegionDataset, target: str) -> RegionDataset:
    """The dataset without the target region's table (never trained on)."""
    regions = [replace_table(r, None) if r.region_id == target else r for r in dataset.regions]
    return RegionDataset(dataset.dims, regions, dataset.variable_schema)


def replace_table(record, table):
    from .table_model import RegionRecord

    return RegionRecord(record.region_id, record.name, record.parent_id, record.pop15, record.variables, table)


def stage_augment(cfg: PipelineConfig, dataset: RegionDataset) -> AugmentedData:
    acfg = cfg.augmentation(dataset)
    ds = training_dataset(dataset, cfg.target_region)
    specs, is_train = generate_specs(ds, acfg)
    regions = [combine_regions(ds, s) for s in specs]
    for n, v in enumerate(regions):
        if not v.io_table.total > 0:
            raise DataError(f"virtual region {n} has non-positive total output")
    train = [v for v, t in zip(regions, is_train) if t]
    test = [v for v, t in zip(regions, is_train) if not t]
    log.info("augmented %d samples (%d train, %d test)", len(regions), len(train), len(test))
    return AugmentedData(train, test, specs, is_train)


def stage_fit_pipeline(cfg: PipelineConfig, dataset: RegionDataset, aug: AugmentedData) -> FeaturePipeline:
    recipe = load_recipe(cfg.recipe) if cfg.recipe else default_recipe(dataset.variable_schema)
    recipe.check(dataset.variable_schema)
    return fit_pipeline(aug.train, recipe, cfg.pca_components)


def _train_one(args):
    addr, x, values, net, seed, ref = args
    t0 = time.perf_counter()
    model = train_item(addr, x, values, net, seed, ref)
    log.debug("trained %s in %.1fs", addr.name, time.perf_counter() - t0)
    return model


def stage_train(cfg: PipelineConfig, dataset: RegionDataset, aug: AugmentedData,
                pipe: FeaturePipeline) -> dict[ItemAddress, TrainedItemModel]:
    x = pipe.transform(aug.train)
    addrs, y = target_matrix([v.io_table for v in aug.train], dataset.dims)
    net = cfg.network(x.shape[1])
    jobs = [(a, x, y[:, n], net, item_seed(cfg.seed, a), pipe.ref) for n, a in enumerate(addrs)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            models = list(ex.map(_train_one, jobs, chunksize=4))
    else:
        models = [_train_one(j) for j in jobs]
    n_const = sum(m.is_constant for m in models)
    log.info("trained %d item models (%d constant)", len(models) - n_const, n_const)
    return dict(zip(addrs, models))


def predict_ratios(models: dict[ItemAddress, TrainedItemModel], pipe: FeaturePipeline, regions) -> dict:
    scores = pipe.transform(regions)
    return {a: predict_item(m, scores, pipe.ref) for a, m in models.items()}


def stage_predict(cfg: PipelineConfig, dataset: RegionDataset, models, pipe: FeaturePipeline,
                  total: float) -> tuple[IOTable, np.ndarray]:
    """Raw (unbalanced) estimate at absolute scale and renormalised Y*."""
    target = dataset.by_id(cfg.target_region)
    ratios = {a: float(v[0]) for a, v in predict_ratios(models, pipe, [target]).items()}
    raw = table_from_ratios(dataset.dims, ratios, total)
    y_star = renormalize_gross_outputs(np.maximum(raw.Y, 0.0), total)
    return raw, y_star


def save_models(models, root) -> None:
    for m in models.values():
        save_item_model(m, root)


def load_models(root, dims) -> dict[ItemAddress, TrainedItemModel]:
    out = {}
    for a in item_addresses(dims):
        d = Path(root) / a.name
        if not d.exists():
            raise DataError(f"missing model directory {d}")
        out[a] = load_item_model(d)
    return out


def test_errors(models, pipe, aug: AugmentedData, dims) -> dict[ItemAddress, float]:
    """Per-item RMSE of ratio predictions on the held-out virtual regions."""
    if not aug.test:
        return {}
    addrs, y = target_matrix([v.io_table for v in aug.test], dims)
    pred = predict_ratios(models, pipe, aug.test)
    return {a: float(np.sqrt(np.mean((pred[a] - y[:, n]) ** 2))) for n, a in enumerate(addrs)}


# -- manifest --------------------------------------------------------------------

@dataclass
class RunManifest:
    config: PipelineConfig
    items: list[dict] = field(default_factory=list)
    balance: dict = field(default_factory=dict)
    metrics_file: str = ""
    failed_stage: str = ""

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_config(self.config, out / "run_config.txt")
        with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["item", "kind", "seed", "epochs_run", "best_epoch", "best_val_loss", "test_rmse"])
            for row in self.items:
                w.writerow([row["item"], row["kind"], row["seed"], row["epochs_run"], row["best_epoch"],
                            row["best_val_loss"], row["test_rmse"]])
        with open(out / "run_summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            w.writerow(["mode", self.config.mode])
            w.writerow(["seed", self.config.seed])
            for k, v in self.balance.items():
                w.writerow([f"balance_{k}", v])
            w.writerow(["metrics_file", self.metrics_file])
            w.writerow(["failed_stage", self.failed_stage])


def write_balance_report(bt, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["iterations", bt.iterations])
        w.writerow(["converged", bt.converged])
        w.writerow(["max_residual", repr(bt.max_residual)])
        w.writerow(["objective", repr(bt.objective)])


def evaluate_to_dir(estimate: IOTable, actual: IOTable, out_dir, figures: str = "svg", bin_width: float = 20.0):
    report = write_evaluation(estimate, actual, out_dir, bin_width)
    if figures != "none":
        plotting.plot_heatmaps(diff_heatmaps(estimate, actual), out_dir, figures)
        plotting.plot_histogram(error_rate_histogram(estimate, actual, bin_width),
                                Path(out_dir) / f"histogram.{figures}")
    return report


def _stage(name, fn, manifest, out):
    try:
        return fn()
    except Exception as exc:
        manifest.failed_stage = name
        manifest.write(out)
        raise StageError(name, exc) from exc


def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg)

    if cfg.mode == "baseline":
        def baseline():
            prior = load_io_table(cfg.prior_table, _dims_for(cfg))
            Y = read_gross_outputs(cfg.gross_outputs)
            total = cfg.total_output if not math.isnan(cfg.total_output) else math.fsum(Y)
            return balance_detailed(prior, Y, total, cfg.solver(), cfg.use_phi)
        table, bt, _ = _stage("balance", baseline, manifest, out)
    else:
        dataset = _stage("load", lambda: load_region_dataset(cfg.dataset), manifest, out)
        if not cfg.target_region:
            raise StageError("load", ConfigError("target_region is required"))
        total = cfg.total_output
        if not (total > 0):
            raise StageError("load", ConfigError("total_output must be a positive number"))
        aug = _stage("augment", lambda: stage_augment(cfg, dataset), manifest, out)
        if cfg.persist_samples:
            write_augmented(out / "augmented", aug.specs, aug.is_train, aug.train + aug.test)
        else:
            write_augmented(out / "augmented", aug.specs, aug.is_train, [])
        pipe = _stage("fit-pipeline", lambda: stage_fit_pipeline(cfg, dataset, aug), manifest, out)
        save_pipeline(pipe, out / "pipeline")
        models = _stage("train", lambda: stage_train(cfg, dataset, aug, pipe), manifest, out)
        save_models(models, out / "models")
        errs = test_errors(models, pipe, aug, dataset.dims)
        for a, m in models.items():
            manifest.items.append({
                "item": a.name, "kind": "constant" if m.is_constant else "network",
                "seed": item_seed(cfg.seed, a), "epochs_run": m.epochs_run, "best_epoch": m.best_epoch,
                "best_val_loss": repr(min(v for _, v in m.history)) if m.history else "",
                "test_rmse": repr(errs.get(a, math.nan))})
        raw, y_star = _stage("predict", lambda: stage_predict(cfg, dataset, models, pipe, total), manifest, out)
        write_io_table(raw, out / "raw_estimate.csv")
        write_gross_outputs(y_star, out / "gross_outputs_predicted.csv")
        table, bt, _ = _stage("balance", lambda: balance_detailed(raw, y_star, total, cfg.solver(), cfg.use_phi),
                              manifest, out)
        if cfg.figures != "none":
            hist = next((m.history for m in models.values() if m.history), None)
            if hist:
                plotting.plot_history(hist, out / f"training_history.{cfg.figures}")

    write_io_table(table, out / "estimate.csv")
    write_balance_report(bt, out / "balance_report.csv")
    manifest.balance = {"iterations": bt.iterations, "converged": bt.converged,
                        "max_residual": repr(bt.max_residual), "objective": repr(bt.objective)}
    if cfg.actual_table:
        def evaluate():
            actual = load_io_table(cfg.actual_table, table.dims)
            return evaluate_to_dir(table, actual, out / "evaluation", cfg.figures, cfg.bin_width)
        _stage("evaluate", evaluate, manifest, out)
        manifest.metrics_file = str(Path("evaluation") / "metrics.csv")
    manifest.write(out)
    return manifest


def _dims_for(cfg: PipelineConfig):
    if cfg.dataset:
        from .table_model import _parse_dims

        return _parse_dims(Path(cfg.dataset) / "dims.csv")
    from .table_model import infer_dims

    return infer_dims(cfg.prior_table)
