import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iotab.balancing import balance
from iotab.synthetic import perturb
from iotab.table_model import (DataError, IODimensions, IOTable, RegionDataset, RegionRecord, infer_dims,
                               load_io_table, load_region_dataset, validate_io_table, write_io_table,
                               write_region_dataset)


def write_dataset_files(root, regions, variables):
    (root / "regions.csv").write_text("region_id,name,parent_id,pop15\n" + regions, encoding="utf-8")
    (root / "variables.csv").write_text("region_id,variable,idx1,idx2,value\n" + variables, encoding="utf-8")


def test_dims_validation():
    with pytest.raises(DataError):
        IODimensions(K=0)
    with pytest.raises(DataError):
        IODimensions(phi_fd=6)
    with pytest.raises(DataError):
        IODimensions(L=2, phi_gva=2)
    assert IODimensions().nx_col == 5


def test_load_two_regions_three_variables(tmp_path):
    write_dataset_files(tmp_path, "R1,One,,100\nR2,Two,,200\n",
                        "R1,SEmp,1,,5\nR1,SEmp,2,,7\nR1,TP,,,50\nR1,Flow,1,2,3\n"
                        "R2,SEmp,1,,1\nR2,TP,,,80\nR2,Flow,2,2,4\n")
    ds = load_region_dataset(tmp_path)
    assert len(ds.regions) == 2
    assert ds.variable_schema == {"SEmp": (2,), "TP": (), "Flow": (2, 2)}
    r2 = ds.by_id("R2")
    assert r2.variables["SEmp"].tolist() == [1.0, 0.0]  # unlisted index is zero
    assert r2.variables["Flow"][1, 1] == 4.0
    assert r2.io_table is None
    assert r2.get("Pop15") == 200.0


def test_unknown_region_in_variables_named(tmp_path):
    write_dataset_files(tmp_path, "R1,One,,100\n", "R9,TP,,,1\n")
    with pytest.raises(DataError, match="R9"):
        load_region_dataset(tmp_path)


def test_containment_cycle(tmp_path):
    write_dataset_files(tmp_path, "A,a,B,1\nB,b,C,1\nC,c,A,1\n", "A,TP,,,1\n")
    with pytest.raises(DataError, match="containment cycle"):
        load_region_dataset(tmp_path)


@pytest.mark.parametrize("regions,variables,match", [
    ("R1,One,X,100\n", "R1,TP,,,1\n", "unknown parent_id X"),
    ("R1,One,,abc\n", "R1,TP,,,1\n", "regions.csv:2"),
    ("R1,One,,-5\n", "R1,TP,,,1\n", "pop15 must be positive"),
    ("R1,One,,1\n", "R1,TP,,,1\nR1,TP,1,,2\n", "inconsistent arity"),
    ("R1,One,,1\n", "R1,TP,,,x\n", "variables.csv:2"),
    ("R1,One,,1\n", "R1,TP,,,1\nR1,TP,,,2\n", "duplicate"),
])
def test_loader_errors_name_file_and_line(tmp_path, regions, variables, match):
    write_dataset_files(tmp_path, regions, variables)
    with pytest.raises(DataError, match=match):
        load_region_dataset(tmp_path)


def test_missing_file(tmp_path):
    (tmp_path / "regions.csv").write_text("region_id,name,parent_id,pop15\n", encoding="utf-8")
    with pytest.raises(DataError, match="variables.csv"):
        load_region_dataset(tmp_path)


def test_ancestors_transitive():
    recs = [RegionRecord("P", "p", None, 1.0, {}), RegionRecord("C", "c", "P", 1.0, {}),
            RegionRecord("W", "w", "C", 1.0, {}), RegionRecord("Q", "q", None, 1.0, {})]
    ds = RegionDataset(IODimensions(), recs, {})
    assert ds.ancestors("W") == {"C", "P"}
    assert ds.related("P", "W") and ds.related("W", "P")
    assert not ds.related("Q", "W")


def test_table_all_zero_except_unit_y(tmp_path):
    dims = IODimensions()
    t = IOTable(dims, np.zeros((12, 12)), np.zeros((12, 6)), np.zeros((6, 12)), np.ones(12))
    write_io_table(t, tmp_path / "t.csv")
    assert load_io_table(tmp_path / "t.csv", dims).total == 12


def test_wrong_industry_count(tmp_path):
    small = IODimensions(K=11)
    t = IOTable(small, np.zeros((11, 11)), np.zeros((11, 6)), np.zeros((6, 11)), np.ones(11))
    write_io_table(t, tmp_path / "t.csv")
    with pytest.raises(DataError, match="expected 20 rows"):
        load_io_table(tmp_path / "t.csv", IODimensions())


def test_non_numeric_cell_reports_coordinates(tmp_path, balanced12):
    write_io_table(balanced12, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    cells = lines[3].split(",")
    cells[4] = "oops"
    lines[3] = ",".join(cells)
    (tmp_path / "t.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="row 4, column 5"):
        load_io_table(tmp_path / "t.csv", IODimensions())


def test_round_trip_bit_exact(tmp_path, balanced12):
    write_io_table(balanced12, tmp_path / "t.csv")
    back = load_io_table(tmp_path / "t.csv", balanced12.dims)
    assert back.identical_to(balanced12)
    assert infer_dims(tmp_path / "t.csv") == balanced12.dims


finite = st.floats(-1e12, 1e12, allow_nan=False, width=64)


@settings(max_examples=30, deadline=None)
@given(A=arrays(np.float64, (2, 2), elements=finite), D=arrays(np.float64, (2, 3), elements=finite),
       V=arrays(np.float64, (2, 2), elements=finite), Y=arrays(np.float64, (2,), elements=finite))
def test_round_trip_property(tmp_path_factory, A, D, V, Y):
    dims = IODimensions(K=2, L=2, M=3)
    t = IOTable(dims, A, D, V, Y)
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_io_table(t, path)
    assert load_io_table(path, dims).identical_to(t)


def test_absent_cells_survive_round_trip(tmp_path, balanced12):
    A = balanced12.A.copy()
    A[11, 11] = np.nan
    t = IOTable(balanced12.dims, A, balanced12.D, balanced12.V, balanced12.Y)
    write_io_table(t, tmp_path / "t.csv")
    back = load_io_table(tmp_path / "t.csv", t.dims)
    assert np.isnan(back.A[11, 11])
    assert back.identical_to(t)


def test_total_is_sum_of_y(balanced12):
    assert math.isclose(balanced12.total, math.fsum(balanced12.Y), rel_tol=1e-12)


def test_arrays_read_only(balanced12):
    with pytest.raises(ValueError):
        balanced12.A[0, 0] = 1.0


def test_validate_balanced_output_empty(rng, balanced12):
    out = balance(perturb(balanced12, rng, 0.2), balanced12.Y, balanced12.total)
    assert validate_io_table(out, 1e-6) == []


def test_validate_one_intermediate_bump(balanced12):
    A = balanced12.A.copy()
    A[2, 5] += 1.0
    t = IOTable(balanced12.dims, A, balanced12.D, balanced12.V, balanced12.Y)
    v = validate_io_table(t, 1e-12)
    assert sorted((x.kind, x.index) for x in v) == [("column", 5), ("row", 2)]
    assert all(abs(x.residual - 1.0) < 1e-6 for x in v)


def test_validate_phi_bump(balanced12):
    D = balanced12.D.copy()
    D[0, balanced12.dims.phi_fd] += 5.0
    t = IOTable(balanced12.dims, balanced12.A, D, balanced12.V, balanced12.Y)
    v = {x.kind: x for x in validate_io_table(t, 1e-12)}
    assert set(v) == {"row", "phi"}
    assert v["row"].index == 0
    assert abs(abs(v["row"].residual) - 5.0) < 1e-6
    assert abs(abs(v["phi"].residual) - 5.0) < 1e-6


def test_dataset_write_load_round_trip(tmp_path, small_economy):
    ds, _ = small_economy
    write_region_dataset(ds, tmp_path / "ds")
    back = load_region_dataset(tmp_path / "ds")
    assert back.dims == ds.dims
    assert back.variable_schema == ds.variable_schema
    for a, b in zip(ds.regions, back.regions):
        assert (a.region_id, a.parent_id, a.pop15) == (b.region_id, b.parent_id, b.pop15)
        for k in a.variables:
            assert np.array_equal(a.variables[k], b.variables[k])
        assert (a.io_table is None) == (b.io_table is None)
        if a.io_table is not None:
            assert a.io_table.identical_to(b.io_table)
