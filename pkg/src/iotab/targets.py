"""Per-item target variables (ratios to total gross output) and their scalers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .table_model import DataError, IODimensions, IOTable

MARGIN = 0.1


class Section(str, Enum):
    GROSS_OUTPUT = "y"
    INTERMEDIATE = "a"
    FINAL_DEMAND = "d"
    VALUE_ADDED = "v"


@dataclass(frozen=True, order=True)
class ItemAddress:
    section: Section
    i: int
    j: int = 0

    @property
    def bounded(self) -> bool:
        """y and a items are non-negative and use the sigmoid head."""
        return self.section in (Section.GROSS_OUTPUT, Section.INTERMEDIATE)

    @property
    def name(self) -> str:
        if self.section is Section.GROSS_OUTPUT:
            return f"y_{self.i + 1}"
        return f"{self.section.value}_{self.i + 1}_{self.j + 1}"

    @classmethod
    def parse(cls, name: str) -> "ItemAddress":
        parts = name.split("_")
        sec = Section(parts[0])
        return cls(sec, int(parts[1]) - 1, int(parts[2]) - 1 if len(parts) > 2 else 0)


def item_addresses(dims: IODimensions) -> list[ItemAddress]:
    K, L, M = dims.K, dims.L, dims.M
    out = [ItemAddress(Section.GROSS_OUTPUT, i) for i in range(K)]
    out += [ItemAddress(Section.INTERMEDIATE, i, j) for i in range(K) for j in range(K)]
    out += [ItemAddress(Section.FINAL_DEMAND, i, g) for i in range(K) for g in range(M)]
    out += [ItemAddress(Section.VALUE_ADDED, h, j) for h in range(L) for j in range(K)]
    return out


@dataclass(frozen=True, eq=False)
class TargetVector:
    y: np.ndarray
    a: np.ndarray
    d: np.ndarray
    v: np.ndarray
    total: float

    def get(self, addr: ItemAddress) -> float:
        if addr.section is Section.GROSS_OUTPUT:
            return float(self.y[addr.i])
        arr = {"a": self.a, "d": self.d, "v": self.v}[addr.section.value]
        return float(arr[addr.i, addr.j])


def build_targets(table: IOTable) -> TargetVector:
    if not table.total > 0:
        raise DataError(f"total gross output must be positive, got {table.total}")
    t = table.filled()
    s = t.total
    return TargetVector(t.Y / s, t.A / s, t.D / s, t.V / s, s)


def target_matrix(tables, dims: IODimensions) -> tuple[list[ItemAddress], np.ndarray]:
    """Stack ratio targets of many tables: rows = tables, cols = items."""
    addrs = item_addresses(dims)
    rows = []
    for t in tables:
        tv = build_targets(t)
        rows.append(np.concatenate([tv.y, tv.a.ravel(), tv.d.ravel(), tv.v.ravel()]))
    return addrs, np.array(rows).reshape(len(rows), len(addrs))


def table_from_ratios(dims: IODimensions, values: dict[ItemAddress, float], total: float) -> IOTable:
    K, L, M = dims.K, dims.L, dims.M
    y, a, d, v = np.zeros(K), np.zeros((K, K)), np.zeros((K, M)), np.zeros((L, K))
    for addr, x in values.items():
        if addr.section is Section.GROSS_OUTPUT:
            y[addr.i] = x
        else:
            {"a": a, "d": d, "v": v}[addr.section.value][addr.i, addr.j] = x
    return IOTable(dims, a * total, d * total, v * total, y * total)


@dataclass(frozen=True)
class BoundedScaler:
    y_l: float
    y_u: float

    def scale(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_l) / (self.y_u - self.y_l)

    def unscale(self, y_star):
        return self.y_l + np.asarray(y_star, dtype=np.float64) * (self.y_u - self.y_l)


@dataclass(frozen=True)
class StandardScaler:
    mu: float
    s: float

    def scale(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mu) / self.s

    def unscale(self, y_star):
        return self.mu + self.s * np.asarray(y_star, dtype=np.float64)


@dataclass(frozen=True)
class Constant:
    value: float

    def unscale(self, y_star):
        return np.full(np.shape(y_star), self.value)


def fit_bounded_scaler(values) -> BoundedScaler | Constant:
    """Map training values into [0, 1] with a 10% margin each side, clipped
    to the unit interval. A degenerate range yields a Constant."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no training values")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return Constant(lo)
    span = hi - lo
    return BoundedScaler(max(0.0, lo - MARGIN * span), min(1.0, hi + MARGIN * span))


def fit_standard_scaler(values) -> StandardScaler | Constant:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no training values")
    mu = float(x.mean())
    s = float(np.sqrt(((x - mu) ** 2).mean()))
    if s == 0.0:
        return Constant(mu)
    return StandardScaler(mu, s)


def fit_item_scaler(addr: ItemAddress, values):
    x = np.asarray(values, dtype=np.float64)
    if not np.any(x):
        return Constant(0.0)
    return fit_bounded_scaler(x) if addr.bounded else fit_standard_scaler(x)


def renormalize_gross_outputs(predicted, total: float) -> np.ndarray:
    """Rescale predicted gross outputs so they sum to ``total``."""
    y = np.asarray(predicted, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("predicted gross outputs must be non-negative")
    s = math.fsum(y)
    if not s > 0:
        raise ValueError("predicted gross outputs are all zero")
    if not total > 0:
        raise ValueError("total must be positive")
    out = y / s * total
    if math.fsum(out) == total:
        return out
    # solve for one entry so the sum is exact: try the correctly rounded
    # total - sum(others) and its neighbours, since ties in the final
    # rounding can miss; fall back to the next largest entry
    for k in np.argsort(-out, kind="stable"):
        if out[k] == 0.0:
            break
        old = out[k]
        c = math.fsum([total] + [-x for n, x in enumerate(out) if n != k])
        lo = hi = c
        cands = [c]
        for _ in range(3):
            lo, hi = np.nextafter(lo, -math.inf), np.nextafter(hi, math.inf)
            cands += [hi, lo]
        for cand in cands:
            if cand <= 0.0:
                continue
            out[k] = cand
            if math.fsum(out) == total:
                return out
        out[k] = old
    return out


def write_scaler(scaler, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "p1", "p2"])
        if isinstance(scaler, BoundedScaler):
            w.writerow(["bounded", repr(scaler.y_l), repr(scaler.y_u)])
        elif isinstance(scaler, StandardScaler):
            w.writerow(["standard", repr(scaler.mu), repr(scaler.s)])
        else:
            w.writerow(["constant", repr(scaler.value), ""])


def read_scaler(path):
    with open(Path(path), newline="", encoding="utf-8") as fh:
        kind, p1, p2 = list(csv.reader(fh))[1]
    if kind == "bounded":
        return BoundedScaler(float(p1), float(p2))
    if kind == "standard":
        return StandardScaler(float(p1), float(p2))
    if kind == "constant":
        return Constant(float(p1))
    raise DataError(f"{path}: unknown scaler kind {kind!r}")
