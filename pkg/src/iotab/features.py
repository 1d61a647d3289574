"""Explanatory variables: recipe evaluation, standardisation and PCA."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .table_model import DataError

log = logging.getLogger(__name__)

KINDS = ("level", "share", "ratio")


@dataclass(frozen=True)
class FeatureEntry:
    """One explanatory variable.

    ``level``: varA[idxA]; ``share``: varA[idxA] / sum(varA);
    ``ratio``: varA[idxA] / varB[idxB]. Indices are 0-based tuples, empty
    for scalars.
    """

    kind: str
    var_a: str
    idx_a: tuple[int, ...] = ()
    var_b: str = ""
    idx_b: tuple[int, ...] = ()

    def label(self) -> str:
        a = self.var_a + "".join(f"[{i + 1}]" for i in self.idx_a)
        if self.kind == "level":
            return a
        if self.kind == "share":
            return f"{a}/sum({self.var_a})"
        return a + "/" + self.var_b + "".join(f"[{i + 1}]" for i in self.idx_b)


@dataclass(frozen=True)
class FeatureRecipe:
    entries: tuple[FeatureEntry, ...]

    def __len__(self):
        return len(self.entries)

    def check(self, schema: dict[str, tuple[int, ...]]) -> None:
        known = dict(schema, Pop15=())
        for e in self.entries:
            for var, idx in ((e.var_a, e.idx_a),) + (((e.var_b, e.idx_b),) if e.kind == "ratio" else ()):
                if var not in known:
                    raise DataError(f"recipe entry {e.label()}: unknown variable {var}")
                shape = known[var]
                if len(idx) != len(shape) or any(i >= n for i, n in zip(idx, shape)):
                    raise DataError(f"recipe entry {e.label()}: index out of range for shape {shape}")


def _parse_idx(text: str) -> tuple[int, ...]:
    # "3" or "3:2" (1-based)
    if not text:
        return ()
    return tuple(int(p) - 1 for p in text.split(":"))


def load_recipe(path) -> FeatureRecipe:
    path = Path(path)
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["kind", "varA", "idxA", "varB", "idxB"]:
            raise DataError(f"{path}:1: expected header kind,varA,idxA,varB,idxB")
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{n}: expected 5 fields")
            kind, va, ia, vb, ib = (x.strip() for x in row)
            if kind not in KINDS:
                raise DataError(f"{path}:{n}: unknown feature kind {kind!r}")
            try:
                entries.append(FeatureEntry(kind, va, _parse_idx(ia), vb, _parse_idx(ib)))
            except ValueError:
                raise DataError(f"{path}:{n}: bad index") from None
    return FeatureRecipe(tuple(entries))


def write_recipe(recipe: FeatureRecipe, path) -> None:
    def fmt(idx):
        return ":".join(str(i + 1) for i in idx)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "varA", "idxA", "varB", "idxB"])
        for e in recipe.entries:
            w.writerow([e.kind, e.var_a, fmt(e.idx_a), e.var_b, fmt(e.idx_b)])


def default_recipe(schema: dict[str, tuple[int, ...]]) -> FeatureRecipe:
    """Level of every variable cell plus shares of every indexed variable."""
    entries = []
    for var, shape in schema.items():
        for idx in np.ndindex(*shape):
            entries.append(FeatureEntry("level", var, tuple(int(i) for i in idx)))
        if shape:
            for idx in np.ndindex(*shape):
                entries.append(FeatureEntry("share", var, tuple(int(i) for i in idx)))
    return FeatureRecipe(tuple(entries))


def build_feature_matrix(regions, recipe: FeatureRecipe) -> np.ndarray:
    """Evaluate a recipe on regions (anything with ``get(name)``), one row
    per region. Zero denominators give 0."""
    regions = list(regions)
    stacked: dict[str, np.ndarray] = {}

    def column(var):
        if var not in stacked:
            try:
                stacked[var] = np.stack([np.asarray(r.get(var), dtype=np.float64) for r in regions])
            except KeyError as exc:
                raise DataError(f"missing variable {exc.args[0]}") from None
        return stacked[var]

    out = np.empty((len(regions), len(recipe)))
    for n, e in enumerate(recipe.entries):
        try:
            a = column(e.var_a)
            num = a[(slice(None),) + e.idx_a]
            if e.kind == "level":
                out[:, n] = num
                continue
            if e.kind == "share":
                den = a.reshape(len(regions), -1).sum(axis=1)
            else:
                den = column(e.var_b)[(slice(None),) + e.idx_b]
        except DataError as exc:
            raise DataError(f"recipe entry {e.label()}: {exc}") from None
        except IndexError:
            raise DataError(f"recipe entry {e.label()}: index out of range") from None
        zero = den == 0.0
        if zero.any():
            log.warning("zero denominator in %s for %d region(s), feature set to 0", e.label(), int(zero.sum()))
        out[:, n] = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
    return out


def build_features(region, recipe: FeatureRecipe) -> np.ndarray:
    return build_feature_matrix([region], recipe)[0]


@dataclass(frozen=True, eq=False)
class StandardizerModel:
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.std == 0


def fit_standardizer(features: np.ndarray) -> StandardizerModel:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a matrix with at least 2 rows")
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))  # population std
    # round-off on a constant column must not survive as a tiny std
    std[std <= 1e-12 * np.maximum(np.abs(mean), 1.0)] = 0.0
    return StandardizerModel(mean, std)


def apply_standardizer(model: StandardizerModel, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    safe = np.where(model.constant, 1.0, model.std)
    return np.where(model.constant, 0.0, (rows - model.mean) / safe)


@dataclass(frozen=True, eq=False)
class PCAModel:
    loadings: np.ndarray  # components x features, orthonormal rows
    explained_variance: np.ndarray
    n_components: int


def fit_pca(standardized: np.ndarray, n_components: int | None = None) -> PCAModel:
    x = np.asarray(standardized, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s ** 2 / x.shape[0]
    # sign convention: largest-magnitude entry of each loading is non-negative
    pivot = vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)]
    vt = vt * np.where(pivot < 0, -1.0, 1.0)[:, None]
    n = vt.shape[0] if n_components is None else n_components
    if n > vt.shape[0]:
        raise ValueError(f"requested {n} components, only {vt.shape[0]} available")
    return PCAModel(vt, var, n)


def project(model: PCAModel, rows: np.ndarray, n: int | None = None) -> np.ndarray:
    n = model.n_components if n is None else n
    if n > model.loadings.shape[0]:
        raise ValueError(f"requested {n} components, only {model.loadings.shape[0]} available")
    return np.asarray(rows, dtype=np.float64) @ model.loadings[:n].T


@dataclass(frozen=True, eq=False)
class FeaturePipeline:
    recipe: FeatureRecipe
    standardizer: StandardizerModel
    pca: PCAModel

    def transform(self, regions) -> np.ndarray:
        x = build_feature_matrix(regions, self.recipe)
        return project(self.pca, apply_standardizer(self.standardizer, x))

    @property
    def ref(self) -> str:
        """Content fingerprint used to match models to their pipeline."""
        import hashlib

        h = hashlib.sha256()
        for arr in (self.standardizer.mean, self.standardizer.std, self.pca.loadings[:self.pca.n_components]):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(repr(self.recipe.entries).encode())
        return h.hexdigest()[:16]


def fit_pipeline(regions, recipe: FeatureRecipe, n_components: int) -> FeaturePipeline:
    x = build_feature_matrix(regions, recipe)
    std = fit_standardizer(x)
    pca = fit_pca(apply_standardizer(std, x), n_components)
    return FeaturePipeline(recipe, std, pca)


def save_pipeline(pipe: FeaturePipeline, out_dir) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_recipe(pipe.recipe, root / "recipe.csv")
    with open(root / "standardizer.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "mean", "std"])
        for e, m, s in zip(pipe.recipe.entries, pipe.standardizer.mean, pipe.standardizer.std):
            w.writerow([e.label(), repr(float(m)), repr(float(s))])
    with open(root / "pca_loadings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in pipe.pca.loadings:
            w.writerow([repr(float(x)) for x in row])
    with open(root / "pca_meta.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "explained_variance"])
        for n, v in enumerate(pipe.pca.explained_variance):
            w.writerow([n + 1, repr(float(v))])
        w.writerow(["n_components", pipe.pca.n_components])


def load_pipeline(in_dir) -> FeaturePipeline:
    root = Path(in_dir)
    recipe = load_recipe(root / "recipe.csv")
    with open(root / "standardizer.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    mean = np.array([float(r[1]) for r in rows])
    std = np.array([float(r[2]) for r in rows])
    with open(root / "pca_loadings.csv", newline="", encoding="utf-8") as fh:
        loadings = np.array([[float(x) for x in r] for r in csv.reader(fh) if r])
    with open(root / "pca_meta.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    var = np.array([float(r[1]) for r in rows if r[0] != "n_components"])
    n = int(next(r[1] for r in rows if r[0] == "n_components"))
    loadings = loadings.reshape(len(var), len(mean))
    return FeaturePipeline(recipe, StandardizerModel(mean, std), PCAModel(loadings, var, n))
