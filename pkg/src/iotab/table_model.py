"""IO-table data model, region datasets and their CSV formats.

Absent (unpublished) cells are stored as NaN so they stay distinct from
published zeros.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class IODimensions:
    K: int = 12
    L: int = 6
    M: int = 6
    phi_fd: int = 0
    phi_gva: int = 0
    # column of D holding net exports; -1 means the last one
    net_exports: int = -1

    def __post_init__(self):
        if self.K < 1 or self.L < 1 or self.M < 1:
            raise DataError(f"invalid dimensions K={self.K} L={self.L} M={self.M}")
        if not 0 <= self.phi_fd < self.M:
            raise DataError(f"phi_fd={self.phi_fd} out of range for M={self.M}")
        if not 0 <= self.phi_gva < self.L:
            raise DataError(f"phi_gva={self.phi_gva} out of range for L={self.L}")
        if not -self.M <= self.net_exports < self.M:
            raise DataError(f"net_exports={self.net_exports} out of range for M={self.M}")

    @property
    def nx_col(self) -> int:
        return self.net_exports % self.M

    def row_labels(self) -> list[str]:
        return [f"I{i + 1}" for i in range(self.K)] + [f"V{h + 1}" for h in range(self.L)] + ["Y"]

    def col_labels(self) -> list[str]:
        return [f"I{i + 1}" for i in range(self.K)] + [f"D{g + 1}" for g in range(self.M)] + ["TOTAL"]


@dataclass(frozen=True, eq=False)
class IOTable:
    """A regional table in millions of currency units.

    ``A`` is K x K, ``D`` is K x M, ``V`` is L x K and ``Y`` has length K.
    """

    dims: IODimensions
    A: np.ndarray
    D: np.ndarray
    V: np.ndarray
    Y: np.ndarray
    total: float = field(init=False)

    def __post_init__(self):
        K, L, M = self.dims.K, self.dims.L, self.dims.M
        for name, arr, shape in (("A", self.A, (K, K)), ("D", self.D, (K, M)),
                                 ("V", self.V, (L, K)), ("Y", self.Y, (K,))):
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "total", float(math.fsum(np.nan_to_num(self.Y))))

    def scaled(self, c: float) -> "IOTable":
        return IOTable(self.dims, self.A * c, self.D * c, self.V * c, self.Y * c)

    def filled(self) -> "IOTable":
        """Copy with absent cells replaced by 0."""
        return IOTable(self.dims, np.nan_to_num(self.A), np.nan_to_num(self.D),
                       np.nan_to_num(self.V), np.nan_to_num(self.Y))

    def grid(self) -> np.ndarray:
        """(K+L) x (K+M) block matrix [[A, D], [V, absent]]."""
        K, L, M = self.dims.K, self.dims.L, self.dims.M
        g = np.full((K + L, K + M), np.nan)
        g[:K, :K] = self.A
        g[:K, K:] = self.D
        g[K:, :K] = self.V
        return g

    @classmethod
    def from_grid(cls, dims: IODimensions, grid: np.ndarray, Y) -> "IOTable":
        K = dims.K
        return cls(dims, grid[:K, :K], grid[:K, K:], grid[K:, :K], Y)

    def identical_to(self, other: "IOTable") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(a, b, equal_nan=True)
            for a, b in ((self.A, other.A), (self.D, other.D), (self.V, other.V), (self.Y, other.Y)))


@dataclass(frozen=True)
class Violation:
    kind: str  # "row", "column" or "phi"
    index: int
    residual: float


def validate_io_table(table: IOTable, tol: float = 1e-6) -> list[Violation]:
    """Check row sums, column sums and the outside-household consumption
    balance. ``tol`` is relative to the table total."""
    t = table.filled()
    scale = max(abs(t.total), 1.0)
    dims = t.dims
    out = []
    rows = t.A.sum(axis=1) + t.D.sum(axis=1) - t.Y
    cols = t.A.sum(axis=0) + t.V.sum(axis=0) - t.Y
    for i, r in enumerate(rows):
        if abs(r) > tol * scale:
            out.append(Violation("row", i, float(r)))
    for j, r in enumerate(cols):
        if abs(r) > tol * scale:
            out.append(Violation("column", j, float(r)))
    phi = t.D[:, dims.phi_fd].sum() - t.V[dims.phi_gva, :].sum()
    if abs(phi) > tol * scale:
        out.append(Violation("phi", dims.phi_fd, float(phi)))
    return out


# -- CSV formats -------------------------------------------------------------

def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return repr(float(x))


def write_io_table(table: IOTable, path) -> None:
    dims = table.dims
    K, L, M = dims.K, dims.L, dims.M
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([""] + dims.col_labels())
        for i in range(K):
            w.writerow([f"I{i + 1}"] + [_fmt(x) for x in table.A[i]]
                       + [_fmt(x) for x in table.D[i]] + [_fmt(table.Y[i])])
        for h in range(L):
            w.writerow([f"V{h + 1}"] + [_fmt(x) for x in table.V[h]] + [""] * (M + 1))
        w.writerow(["Y"] + [_fmt(x) for x in table.Y] + [""] * M + [_fmt(table.total)])


def _parse_cell(text: str, where: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: non-numeric cell {text!r}") from None


def load_io_table(path, dims: IODimensions) -> IOTable:
    path = Path(path)
    K, L, M = dims.K, dims.L, dims.M
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    if len(rows) != K + L + 2:
        raise DataError(f"{path}: expected {K + L + 2} rows for K={K}, L={L}, found {len(rows)}")
    for n, row in enumerate(rows, start=1):
        if len(row) != K + M + 2:
            raise DataError(f"{path}:{n}: expected {K + M + 2} columns for K={K}, M={M}, found {len(row)}")
    grid = np.full((K + L + 1, K + M + 1), np.nan)
    for r in range(K + L + 1):
        for c in range(K + M + 1):
            grid[r, c] = _parse_cell(rows[r + 1][c + 1], f"{path}: row {r + 2}, column {c + 2}")
    return IOTable(dims, grid[:K, :K], grid[:K, K:K + M], grid[K:K + L, :K], grid[K + L, :K])


@dataclass(frozen=True, eq=False)
class RegionRecord:
    region_id: str
    name: str
    parent_id: str | None
    pop15: float
    variables: dict[str, np.ndarray]
    io_table: IOTable | None = None

    def get(self, name: str) -> np.ndarray:
        if name in self.variables:
            return self.variables[name]
        if name == "Pop15":
            return np.asarray(self.pop15)
        raise KeyError(name)


@dataclass(frozen=True, eq=False)
class RegionDataset:
    dims: IODimensions
    regions: list[RegionRecord]
    # name -> shape () for scalars, (n,) or (n, m) for indexed variables
    variable_schema: dict[str, tuple[int, ...]]

    def __post_init__(self):
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate region_id")
        by_id = {r.region_id: r for r in self.regions}
        for r in self.regions:
            if r.parent_id is not None and r.parent_id not in by_id:
                raise DataError(f"region {r.region_id}: unknown parent_id {r.parent_id}")
            if r.io_table is not None and r.io_table.dims != self.dims:
                raise DataError(f"region {r.region_id}: io table dims differ from dataset dims")
        parents = {r.region_id: r.parent_id for r in self.regions}
        chains = {}
        for rid in parents:
            chain, cur = [], parents[rid]
            while cur is not None:
                if cur == rid or cur in chain:
                    raise DataError(f"containment cycle through region {rid}")
                chain.append(cur)
                cur = parents[cur]
            chains[rid] = frozenset(chain)
        object.__setattr__(self, "_ancestors", chains)
        object.__setattr__(self, "_by_id", by_id)

    def by_id(self, region_id: str) -> RegionRecord:
        return self._by_id[region_id]

    def ancestors(self, region_id: str) -> frozenset[str]:
        return self._ancestors[region_id]

    def related(self, a: str, b: str) -> bool:
        """True if one region contains the other (transitively)."""
        return a == b or a in self.ancestors(b) or b in self.ancestors(a)

    def training_regions(self) -> list[RegionRecord]:
        return [r for r in self.regions if r.io_table is not None]


def _read_csv(path: Path, header: list[str]) -> list[tuple[int, dict[str, str]]]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError:
        raise DataError(f"{path}: missing file") from None
    with fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != header:
            raise DataError(f"{path}:1: expected header {','.join(header)}")
        out = []
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{n}: expected {len(header)} fields, found {len(row)}")
            out.append((n, dict(zip(header, (x.strip() for x in row)))))
        return out


def _parse_dims(path: Path) -> IODimensions:
    # dims.csv is optional: key,value rows for K, L, M, phi_fd, phi_gva, net_exports
    if not path.exists():
        return IODimensions()
    kw = {}
    for n, row in _read_csv(path, ["key", "value"]):
        try:
            kw[row["key"]] = int(row["value"])
        except ValueError:
            raise DataError(f"{path}:{n}: non-integer value {row['value']!r}") from None
    try:
        return IODimensions(**kw)
    except TypeError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_region_dataset(path, dims: IODimensions | None = None) -> RegionDataset:
    """Load ``regions.csv``, ``variables.csv`` and any ``iotable_<id>.csv``."""
    root = Path(path)
    if dims is None:
        dims = _parse_dims(root / "dims.csv")

    regions_csv = root / "regions.csv"
    meta = {}
    for n, row in _read_csv(regions_csv, ["region_id", "name", "parent_id", "pop15"]):
        rid = row["region_id"]
        if not rid:
            raise DataError(f"{regions_csv}:{n}: empty region_id")
        if rid in meta:
            raise DataError(f"{regions_csv}:{n}: duplicate region_id {rid}")
        try:
            pop = float(row["pop15"])
        except ValueError:
            raise DataError(f"{regions_csv}:{n}: non-numeric pop15 {row['pop15']!r}") from None
        if not (pop > 0 and math.isfinite(pop)):
            raise DataError(f"{regions_csv}:{n}: pop15 must be positive, got {pop}")
        meta[rid] = (row["name"], row["parent_id"] or None, pop, n)
    for rid, (_, parent, _, n) in meta.items():
        if parent is not None and parent not in meta:
            raise DataError(f"{regions_csv}:{n}: region {rid} has unknown parent_id {parent}")

    variables_csv = root / "variables.csv"
    raw: dict[str, dict[str, dict[tuple[int, ...], float]]] = {rid: {} for rid in meta}
    arity: dict[str, int] = {}
    for n, row in _read_csv(variables_csv, ["region_id", "variable", "idx1", "idx2", "value"]):
        rid, var = row["region_id"], row["variable"]
        if rid not in meta:
            raise DataError(f"{variables_csv}:{n}: unknown region_id {rid}")
        if not var:
            raise DataError(f"{variables_csv}:{n}: empty variable name")
        idx = []
        for key in ("idx1", "idx2"):
            if row[key]:
                try:
                    k = int(row[key])
                except ValueError:
                    raise DataError(f"{variables_csv}:{n}: non-integer {key} {row[key]!r}") from None
                if k < 1:
                    raise DataError(f"{variables_csv}:{n}: indices are 1-based, got {k}")
                idx.append(k - 1)
        if row["idx2"] and not row["idx1"]:
            raise DataError(f"{variables_csv}:{n}: idx2 given without idx1")
        if arity.setdefault(var, len(idx)) != len(idx):
            raise DataError(f"{variables_csv}:{n}: variable {var} used with inconsistent arity")
        value = _parse_cell(row["value"], f"{variables_csv}:{n}")
        if not math.isfinite(value):
            raise DataError(f"{variables_csv}:{n}: value must be finite")
        cells = raw[rid].setdefault(var, {})
        if tuple(idx) in cells:
            raise DataError(f"{variables_csv}:{n}: duplicate entry for {rid}/{var}{[i + 1 for i in idx]}")
        cells[tuple(idx)] = value

    schema: dict[str, tuple[int, ...]] = {}
    for var, ar in arity.items():
        shape = [0] * ar
        for cells in raw.values():
            for idx in cells.get(var, {}):
                shape = [max(s, i + 1) for s, i in zip(shape, idx)]
        schema[var] = tuple(shape)

    regions = []
    for rid, (name, parent, pop, _) in meta.items():
        variables = {}
        for var, shape in schema.items():
            # indices not listed for a region are zero (e.g. no establishments)
            arr = np.zeros(shape)
            for idx, value in raw[rid].get(var, {}).items():
                arr[idx] = value
            variables[var] = arr
        table_path = root / f"iotable_{rid}.csv"
        table = load_io_table(table_path, dims) if table_path.exists() else None
        regions.append(RegionRecord(rid, name, parent, pop, variables, table))
    return RegionDataset(dims, regions, schema)


def write_variables(rows, path) -> None:
    """Write ``(region_id, name, array)`` triples in the long variables format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "variable", "idx1", "idx2", "value"])
        for rid, name, arr in rows:
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 0:
                w.writerow([rid, name, "", "", repr(float(arr))])
            elif arr.ndim == 1:
                for i, x in enumerate(arr):
                    w.writerow([rid, name, i + 1, "", repr(float(x))])
            else:
                for (i, j), x in np.ndenumerate(arr):
                    w.writerow([rid, name, i + 1, j + 1, repr(float(x))])


def write_region_dataset(dataset: RegionDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    d = dataset.dims
    with open(root / "dims.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for key in ("K", "L", "M", "phi_fd", "phi_gva", "net_exports"):
            w.writerow([key, getattr(d, key)])
    with open(root / "regions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "name", "parent_id", "pop15"])
        for r in dataset.regions:
            w.writerow([r.region_id, r.name, r.parent_id or "", repr(float(r.pop15))])
    write_variables(((r.region_id, name, arr) for r in dataset.regions
                     for name, arr in r.variables.items()), root / "variables.csv")
    for r in dataset.regions:
        if r.io_table is not None:
            write_io_table(r.io_table, root / f"iotable_{r.region_id}.csv")


def infer_dims(path, **kw) -> IODimensions:
    """Read K, L and M off the row and column labels of a table CSV; the
    remaining fields come from ``kw`` or their defaults."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    cols = [c.strip() for c in rows[0][1:]]
    labels = [r[0].strip() for r in rows[1:] if r]
    K = sum(1 for c in cols if c.startswith("I"))
    M = sum(1 for c in cols if c.startswith("D"))
    L = sum(1 for c in labels if c.startswith("V"))
    if K == 0 or M == 0 or L == 0:
        raise DataError(f"{path}: cannot infer dimensions from labels")
    try:
        return IODimensions(K=K, L=L, M=M, **kw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
