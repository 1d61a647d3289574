"""Estimation-error indicators, difference heatmaps and error-rate histograms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .table_model import DataError, IOTable

SCOPES = ("All", "Intermediate", "FinalDemand", "FinalDemandExNetExports",
          "NetExportsOnly", "GrossValueAdded", "GrossOutput")
METRICS = ("STPE", "MAD", "U2", "RMSE", "MAPE")


def _scope_cells(table: IOTable) -> dict[str, np.ndarray]:
    """Flattened cells per scope. "All" covers the A, D and V sections."""
    d = table.dims
    nx = d.nx_col
    keep = [g for g in range(d.M) if g != nx]
    A, D, V = table.A.ravel(), table.D.ravel(), table.V.ravel()
    return {
        "All": np.concatenate([A, D, V]),
        "Intermediate": A,
        "FinalDemand": D,
        "FinalDemandExNetExports": table.D[:, keep].ravel(),
        "NetExportsOnly": table.D[:, nx],
        "GrossValueAdded": V,
        "GrossOutput": table.Y,
    }


def indicators(estimate, actual) -> dict[str, float]:
    """STPE, MAD, U2, RMSE and MAPE for paired cells plus the counts N1, N2.

    NaN in ``actual`` marks an absent cell and drops it; NaN in
    ``estimate`` counts as 0. Undefined indicators are NaN.
    """
    est = np.asarray(estimate, dtype=np.float64).ravel()
    act = np.asarray(actual, dtype=np.float64).ravel()
    present = ~np.isnan(act)
    est, act = np.nan_to_num(est[present]), act[present]
    diff = est - act
    abs_sum = math.fsum(np.abs(act))
    sq_sum = math.fsum(act ** 2)
    n1 = int(np.sum((act != 0) & (est != 0)))
    nz = act != 0
    n2 = int(np.sum(nz))
    err_abs = math.fsum(np.abs(diff))
    err_sq = math.fsum(diff ** 2)
    nan = math.nan
    return {
        "STPE": err_abs / abs_sum if abs_sum > 0 else nan,
        "MAD": err_abs / n1 if n1 else nan,
        "U2": math.sqrt(err_sq) / math.sqrt(sq_sum) if sq_sum > 0 else nan,
        "RMSE": math.sqrt(err_sq / n1) if n1 else nan,
        "MAPE": math.fsum(np.abs(diff[nz] / act[nz])) / n2 if n2 else nan,
        "N1": n1,
        "N2": n2,
    }


@dataclass(frozen=True)
class MetricsReport:
    scopes: dict[str, dict[str, float]]

    def __getitem__(self, scope):
        return self.scopes[scope]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["scope"] + list(METRICS) + ["N1", "N2"])
            for scope in SCOPES:
                row = self.scopes[scope]
                w.writerow([scope] + ["" if math.isnan(row[m]) else repr(row[m]) for m in METRICS]
                           + [row["N1"], row["N2"]])


def _check_dims(estimate: IOTable, actual: IOTable):
    if estimate.dims != actual.dims:
        raise DataError(f"table dimensions differ: {estimate.dims} vs {actual.dims}")


def compute_metrics(estimate: IOTable, actual: IOTable) -> MetricsReport:
    _check_dims(estimate, actual)
    e, a = _scope_cells(estimate), _scope_cells(actual)
    return MetricsReport({s: indicators(e[s], a[s]) for s in SCOPES})


def _layout_grid(table: IOTable) -> np.ndarray:
    """(K+L+1) x (K+M+1) grid: rows I/V/Y, columns I/D/Y; corner blocks absent."""
    d = table.dims
    K, L, M = d.K, d.L, d.M
    g = np.full((K + L + 1, K + M + 1), np.nan)
    g[:K, :K] = table.A
    g[:K, K:K + M] = table.D
    g[K:K + L, :K] = table.V
    g[K + L, :K] = table.Y
    g[:K, K + M] = table.Y
    return g


def heatmap_labels(dims):
    rows = [f"I{i + 1}" for i in range(dims.K)] + [f"V{h + 1}" for h in range(dims.L)] + ["Y"]
    cols = [f"I{i + 1}" for i in range(dims.K)] + [f"D{g + 1}" for g in range(dims.M)] + ["Y"]
    return rows, cols


@dataclass(frozen=True, eq=False)
class DiffHeatmaps:
    abs_diff: np.ndarray
    rate: np.ndarray
    row_labels: list[str]
    col_labels: list[str]


def diff_heatmaps(estimate: IOTable, actual: IOTable, percent: bool = True) -> DiffHeatmaps:
    _check_dims(estimate, actual)
    e, a = _layout_grid(estimate), _layout_grid(actual)
    absent = np.isnan(a)
    diff = np.abs(np.nan_to_num(e) - a)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = diff / np.abs(a) * (100.0 if percent else 1.0)
    rate[absent | (a == 0)] = np.nan
    diff[absent] = np.nan
    rows, cols = heatmap_labels(estimate.dims)
    return DiffHeatmaps(diff, rate, rows, cols)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray  # interior edges from -100 to 100
    counts: np.ndarray  # len(edges) + 1: low tail, interior bins, high tail

    def bins(self):
        """(label, lo, hi, count) rows; tails are open-ended."""
        out = [("<=-100", -math.inf, self.edges[0], int(self.counts[0]))]
        for k in range(len(self.edges) - 1):
            out.append((f"[{self.edges[k]:g},{self.edges[k + 1]:g})", self.edges[k], self.edges[k + 1],
                        int(self.counts[k + 1])))
        out.append((">=100", self.edges[-1], math.inf, int(self.counts[-1])))
        return out


def signed_rates(estimate: IOTable, actual: IOTable) -> np.ndarray:
    """(estimate - actual) / actual * 100 over the A, D and V cells with a
    non-zero, present actual value."""
    _check_dims(estimate, actual)
    e = np.nan_to_num(_scope_cells(estimate)["All"])
    a = _scope_cells(actual)["All"]
    keep = ~np.isnan(a) & (a != 0)
    return (e[keep] - a[keep]) / a[keep] * 100.0


def rate_edges(bin_width: float = 20.0) -> np.ndarray:
    """Bins centred on 0 (e.g. [-10, 10) for width 20), cut at +-100."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    half = bin_width / 2
    n = int(math.floor((100 - half) / bin_width + 1e-9))
    inner = [half + k * bin_width for k in range(n + 1) if half + k * bin_width < 100]
    return np.array([-100.0] + sorted(-x for x in inner) + inner + [100.0])


def histogram_of_rates(rates, bin_width: float = 20.0) -> Histogram:
    edges = rate_edges(bin_width)
    r = np.asarray(rates, dtype=np.float64)
    counts = np.zeros(len(edges) + 1, dtype=int)
    counts[0] = int(np.sum(r <= -100))
    counts[-1] = int(np.sum(r >= 100))
    mid = r[(r > -100) & (r < 100)]
    idx = np.searchsorted(edges, mid, side="right")
    np.add.at(counts, idx, 1)
    return Histogram(edges, counts)


def error_rate_histogram(estimate: IOTable, actual: IOTable, bin_width: float = 20.0) -> Histogram:
    return histogram_of_rates(signed_rates(estimate, actual), bin_width)


def write_grid_csv(grid: np.ndarray, rows, cols, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(cols))
        for label, row in zip(rows, grid):
            w.writerow([label] + ["" if math.isnan(x) else repr(float(x)) for x in row])


def write_histogram_csv(hist: Histogram, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lo", "hi", "count"])
        for label, lo, hi, count in hist.bins():
            w.writerow([label, lo, hi, count])


def write_evaluation(estimate: IOTable, actual: IOTable, out_dir, bin_width: float = 20.0) -> MetricsReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = compute_metrics(estimate, actual)
    report.write_csv(out / "metrics.csv")
    hm = diff_heatmaps(estimate, actual)
    write_grid_csv(hm.abs_diff, hm.row_labels, hm.col_labels, out / "heatmap_abs.csv")
    write_grid_csv(hm.rate, hm.row_labels, hm.col_labels, out / "heatmap_rate.csv")
    write_histogram_csv(error_rate_histogram(estimate, actual, bin_width), out / "histogram.csv")
    return report
