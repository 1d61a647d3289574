"""Virtual-region generation by mixing per-capita region data.

Each virtual region is a Dirichlet-weighted combination of 2-5 real
regions, converted to per-capita (population 15+) values and rescaled to a
target population.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .table_model import DataError, IOTable, RegionDataset, write_io_table, write_variables

log = logging.getLogger(__name__)

MAX_REJECTIONS = 10_000


class SamplingError(DataError):
    pass


@dataclass(frozen=True)
class FixedScale:
    population: float


@dataclass(frozen=True)
class UniformScale:
    lo: float
    hi: float


@dataclass(frozen=True)
class AugmentationConfig:
    n_samples: int = 50_000
    train_fraction: float = 0.8
    k_min: int = 2
    k_max: int = 5
    scale_mode: FixedScale | UniformScale = FixedScale(1.0)
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if isinstance(self.scale_mode, UniformScale):
            if not 0 < self.scale_mode.lo <= self.scale_mode.hi:
                raise ValueError("uniform scale needs 0 < lo <= hi")
        elif not self.scale_mode.population > 0:
            raise ValueError("fixed scale population must be positive")


@dataclass(frozen=True)
class MixtureSpec:
    members: tuple[tuple[str, float], ...]
    target_population: float


@dataclass(frozen=True, eq=False)
class VirtualRegion:
    variables: dict[str, np.ndarray]
    pop15: float
    io_table: IOTable

    def get(self, name: str) -> np.ndarray:
        if name in self.variables:
            return self.variables[name]
        if name == "Pop15":
            return np.asarray(self.pop15)
        raise KeyError(name)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one sample, so results do not depend on how
    samples are distributed over workers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _max_antichain(dataset: RegionDataset, ids: list[str]) -> int:
    # containment is a forest, so the largest unrelated set is the set of
    # candidates without a candidate descendant
    has_desc = set()
    for rid in ids:
        has_desc.update(a for a in dataset.ancestors(rid) if a in ids)
    return sum(1 for rid in ids if rid not in has_desc)


def sample_mixture(dataset: RegionDataset, cfg: AugmentationConfig, rng: np.random.Generator,
                   candidates: list[str] | None = None) -> MixtureSpec:
    if candidates is None:
        candidates = [r.region_id for r in dataset.training_regions()]
    if _max_antichain(dataset, candidates) < cfg.k_max:
        raise SamplingError(
            f"need {cfg.k_max} mutually non-inclusive regions, dataset has "
            f"{_max_antichain(dataset, candidates)}")
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    for _ in range(MAX_REJECTIONS):
        picks = rng.choice(len(candidates), size=k, replace=False)
        members = [candidates[p] for p in picks]
        if not any(dataset.related(a, b) for n, a in enumerate(members) for b in members[n + 1:]):
            break
    else:
        raise SamplingError(f"no containment-free set of {k} regions after {MAX_REJECTIONS} draws")
    # Dirichlet(1, ..., 1) as normalised unit exponentials
    e = rng.standard_exponential(k)
    weights = e / e.sum()
    mode = cfg.scale_mode
    if isinstance(mode, UniformScale):
        pop = float(rng.uniform(mode.lo, mode.hi))
    else:
        pop = float(mode.population)
    return MixtureSpec(tuple(zip(members, (float(w) for w in weights))), pop)


def combine_regions(dataset: RegionDataset, spec: MixtureSpec) -> VirtualRegion:
    """target_population * sum_m w_m * value_m / pop15_m for every variable
    and every table cell. Absent cells count as 0."""
    recs = [dataset.by_id(rid) for rid, _ in spec.members]
    for r in recs:
        if r.io_table is None:
            raise DataError(f"region {r.region_id} has no io table to combine")
    # coefficient per member; equals 1 exactly for a singleton at its own population
    coef = [w * (spec.target_population / r.pop15) for (_, w), r in zip(spec.members, recs)]

    def mix(arrays):
        out = coef[0] * np.nan_to_num(arrays[0])
        for c, a in zip(coef[1:], arrays[1:]):
            out = out + c * np.nan_to_num(a)
        return out

    variables = {name: mix([r.variables[name] for r in recs]) for name in recs[0].variables}
    tabs = [r.io_table for r in recs]
    table = IOTable(dataset.dims, mix([t.A for t in tabs]), mix([t.D for t in tabs]),
                    mix([t.V for t in tabs]), mix([t.Y for t in tabs]))
    return VirtualRegion(variables, float(spec.target_population), table)


def generate_specs(dataset: RegionDataset, cfg: AugmentationConfig) -> tuple[list[MixtureSpec], np.ndarray]:
    """Sample all mixture specs and the train mask (shuffle-then-cut)."""
    candidates = [r.region_id for r in dataset.training_regions()]
    specs = [sample_mixture(dataset, cfg, sample_rng(cfg.rng_seed, n), candidates)
             for n in range(cfg.n_samples)]
    n_train = int(round(cfg.train_fraction * cfg.n_samples))
    order = np.random.default_rng([cfg.rng_seed, 0x5EED]).permutation(cfg.n_samples)
    is_train = np.zeros(cfg.n_samples, dtype=bool)
    is_train[order[:n_train]] = True
    return specs, is_train


def generate_training_set(dataset: RegionDataset, cfg: AugmentationConfig):
    """Return ``(train, test)`` lists of VirtualRegion."""
    specs, is_train = generate_specs(dataset, cfg)
    regions = [combine_regions(dataset, s) for s in specs]
    for n, v in enumerate(regions):
        if not v.io_table.total > 0:
            raise DataError(f"virtual region {n} has non-positive total output")
    train = [v for v, t in zip(regions, is_train) if t]
    test = [v for v, t in zip(regions, is_train) if not t]
    return train, test


def write_augmented(out_dir, specs: list[MixtureSpec], is_train: np.ndarray,
                    regions: list[VirtualRegion]) -> None:
    """Persist samples as ``<split>/sample_<n>.csv`` (table) and
    ``<split>/sample_<n>_variables.csv`` plus ``manifest.csv``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "members", "weights", "target_population", "split"])
        for n, (spec, train) in enumerate(zip(specs, is_train)):
            w.writerow([n, ";".join(m for m, _ in spec.members),
                        ";".join(repr(x) for _, x in spec.members),
                        repr(spec.target_population), "train" if train else "test"])
    for n, (v, train) in enumerate(zip(regions, is_train)):
        split = root / ("train" if train else "test")
        write_io_table(v.io_table, split / f"sample_{n}.csv")
        rows = [(f"sample_{n}", "Pop15", v.pop15)] + [(f"sample_{n}", k, a) for k, a in v.variables.items()]
        write_variables(rows, split / f"sample_{n}_variables.csv")
