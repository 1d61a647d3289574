import math

import numpy as np
import pytest

from iotab.metrics import (SCOPES, compute_metrics, diff_heatmaps, error_rate_histogram, histogram_of_rates,
                           indicators, rate_edges, signed_rates, write_evaluation)
from iotab.plotting import plot_heatmaps, plot_histogram, plot_history
from iotab.synthetic import perturb
from iotab.table_model import DataError, IODimensions, IOTable

X = np.array([100.0, -50.0, 200.0])
XT = np.array([110.0, -40.0, 190.0])


def test_three_cell_oracle():
    m = indicators(XT, X)
    assert m["STPE"] == pytest.approx(30 / 350, rel=1e-12)
    assert round(m["STPE"], 6) == 0.085714
    assert m["MAD"] == 10.0
    assert round(m["U2"], 6) == 0.075593
    assert m["RMSE"] == 10.0
    assert round(m["MAPE"], 6) == 0.116667
    assert (m["N1"], m["N2"]) == (3, 3)


def test_identity_all_zero(balanced12):
    rep = compute_metrics(balanced12, balanced12)
    for scope in SCOPES:
        for k in ("STPE", "MAD", "U2", "RMSE", "MAPE"):
            assert rep[scope][k] == 0.0


def test_zero_estimate():
    m = indicators(np.zeros(3), X)
    assert m["U2"] == 1.0 and m["STPE"] == 1.0
    # both-nonzero pairs are needed for MAD and RMSE
    assert m["N1"] == 0 and math.isnan(m["MAD"]) and math.isnan(m["RMSE"])
    assert m["MAPE"] == 1.0


def test_absent_cells():
    act = np.array([100.0, np.nan, 0.0])
    est = np.array([np.nan, 7.0, 3.0])
    m = indicators(est, act)
    # absent actual dropped; absent estimate counts as 0
    assert m["STPE"] == pytest.approx(103 / 100)
    assert m["N2"] == 1 and m["MAPE"] == 1.0
    assert math.isnan(indicators([1.0], [0.0])["STPE"])


def test_scale_properties(rng):
    a, e = rng.normal(size=50), rng.normal(size=50)
    base = indicators(e, a)
    for c in (1e-3, 7.5, 1e6):
        m = indicators(e * c, a * c)
        for k in ("STPE", "U2", "MAPE"):
            assert m[k] == pytest.approx(base[k], rel=1e-12)
        for k in ("MAD", "RMSE"):
            assert m[k] == pytest.approx(c * base[k], rel=1e-12)


def test_scope_decomposability(rng, balanced12):
    est = perturb(balanced12, rng, 0.2)
    rep = compute_metrics(est, balanced12)
    num = {s: rep[s]["STPE"] * sum(np.abs(c).sum() for c in cells)
           for s, cells in (("Intermediate", [balanced12.A]), ("FinalDemand", [balanced12.D]),
                            ("GrossValueAdded", [balanced12.V]), ("All", [balanced12.A, balanced12.D, balanced12.V]))}
    assert num["All"] == pytest.approx(num["Intermediate"] + num["FinalDemand"] + num["GrossValueAdded"], rel=1e-12)
    assert all(rep[s]["STPE"] >= 0 for s in SCOPES)


def test_dims_mismatch(balanced12):
    d = IODimensions(K=2, L=1, M=1)
    other = IOTable(d, np.ones((2, 2)), np.ones((2, 1)), np.ones((1, 2)), np.full(2, 3.0))
    with pytest.raises(DataError):
        compute_metrics(other, balanced12)
    with pytest.raises(DataError):
        diff_heatmaps(other, balanced12)


def _tiny(A, D=None, V=None):
    d = IODimensions(K=2, L=1, M=1)
    A = np.asarray(A, dtype=float)
    D = np.ones((2, 1)) if D is None else np.asarray(D, dtype=float)
    V = np.ones((1, 2)) if V is None else np.asarray(V, dtype=float)
    return IOTable(d, A, D, V, A.sum(axis=1) + D.sum(axis=1))


def test_heatmap_cells():
    act = _tiny([[0.0, 200.0], [1.0, 1.0]])
    est = _tiny([[5.0, 190.0], [1.0, 1.0]])
    hm = diff_heatmaps(est, act)
    assert hm.abs_diff.shape == (2 + 1 + 1, 2 + 1 + 1)
    assert hm.abs_diff[0, 0] == 5.0 and math.isnan(hm.rate[0, 0])
    assert hm.rate[0, 1] == pytest.approx(5.0)
    assert math.isnan(hm.abs_diff[3, 3])  # corner block is absent
    assert hm.row_labels == ["I1", "I2", "V1", "Y"] and hm.col_labels == ["I1", "I2", "D1", "Y"]
    raw = diff_heatmaps(est, act, percent=False)
    assert raw.rate[0, 1] == pytest.approx(0.05)


def test_heatmap_identity(balanced12):
    hm = diff_heatmaps(balanced12, balanced12)
    assert np.nanmax(hm.abs_diff) == 0 and np.nanmax(hm.rate) == 0


def test_rate_edges_centred():
    e = rate_edges(20)
    assert e[0] == -100 and e[-1] == 100
    assert -10 in e and 10 in e and 0 not in e


def test_histogram_tail_and_centre():
    h = histogram_of_rates([250.0, -300.0, 0.0, 5.0])
    bins = {b[0]: b[3] for b in h.bins()}
    assert bins[">=100"] == 1 and bins["<=-100"] == 1
    assert bins["[-10,10)"] == 2


def test_histogram_three_of_four():
    act = _tiny([[100.0, 100.0], [100.0, 100.0]], D=[[0.0], [0.0]], V=[[0.0, 0.0]])
    est = _tiny([[105.0, 91.0], [99.0, 150.0]], D=[[0.0], [0.0]], V=[[0.0, 0.0]])
    rates = signed_rates(est, act)
    assert sorted(rates.tolist()) == pytest.approx([-9.0, -1.0, 5.0, 50.0])
    bins = {b[0]: b[3] for b in error_rate_histogram(est, act).bins()}
    assert bins["[-10,10)"] == 3 and bins["[50,70)"] == 1
    assert sum(bins.values()) == 4


def test_histogram_identity(balanced12):
    h = error_rate_histogram(balanced12, balanced12)
    bins = {b[0]: b[3] for b in h.bins()}
    assert bins["[-10,10)"] == int(h.counts.sum())


def test_write_evaluation_and_plots(tmp_path, rng, balanced12):
    est = perturb(balanced12, rng, 0.1)
    rep = write_evaluation(est, balanced12, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"metrics.csv", "heatmap_abs.csv", "heatmap_rate.csv", "histogram.csv"} <= names
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0].startswith("scope,STPE,MAD,U2,RMSE,MAPE")
    assert rep["All"]["STPE"] > 0
    paths = plot_heatmaps(diff_heatmaps(est, balanced12), tmp_path / "fig")
    paths.append(plot_histogram(error_rate_histogram(est, balanced12), tmp_path / "fig" / "hist.svg"))
    paths.append(plot_history([[1.0, 2.0], [0.5, 1.0]], tmp_path / "fig" / "hist.png", "y_1"))
    for p in paths:
        assert p.exists() and p.stat().st_size > 0
    again = plot_heatmaps(diff_heatmaps(est, balanced12), tmp_path / "fig2")
    assert again[0].read_bytes() == paths[0].read_bytes()
