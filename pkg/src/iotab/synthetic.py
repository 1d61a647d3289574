"""Seeded synthetic data: random balanced tables and a toy regional economy.

The economy stands in for real regional statistics. Every region shares
one ratio structure (input coefficients, final-demand and value-added
splits) perturbed by multiplicative noise, and its explanatory variables
are noisy functions of its industry mix and population.
"""

from __future__ import annotations

import numpy as np

from .table_model import IODimensions, IOTable, RegionDataset, RegionRecord


def random_balanced_table(rng: np.random.Generator, dims: IODimensions = IODimensions(),
                          total: float = 1e6, neg_share: float = 0.15,
                          zero_share: float = 0.0) -> IOTable:
    """A random table satisfying row, column and phi constraints, with
    roughly ``neg_share`` of final-demand / value-added cells negative and
    ``zero_share`` of intermediate cells zero."""
    K, L, M = dims.K, dims.L, dims.M
    Y = rng.uniform(0.5, 1.5, K)
    Y *= total / Y.sum()
    C = rng.uniform(0.0, 1.0, (K, K))
    C[rng.random((K, K)) < zero_share] = 0.0
    C *= rng.uniform(0.3, 0.6, K) / np.maximum(C.sum(axis=0), 1e-12)
    A = C * Y[None, :]

    # value added: remainder of each column, shares with some negatives
    gva = Y - A.sum(axis=0)
    vs = rng.uniform(0.2, 1.0, (L, K))
    vs[rng.random((L, K)) < neg_share] *= -0.15
    if L > 1:
        # subsidies row is negative throughout
        sub = L - 1 if L - 1 != dims.phi_gva else 0
        vs[sub] = -np.abs(vs[sub]) * 0.1
    vs /= vs.sum(axis=0)
    V = vs * gva[None, :]

    # final demand: phi column matches the phi row total, net exports close rows
    fd = Y - A.sum(axis=1)
    phi_total = V[dims.phi_gva].sum()
    D = np.zeros((K, M))
    w = rng.uniform(0.2, 1.0, K)
    D[:, dims.phi_fd] = phi_total * w / w.sum()
    others = [g for g in range(M) if g not in (dims.phi_fd, dims.nx_col)]
    rest = fd - D[:, dims.phi_fd]
    for g in others:
        share = rng.uniform(0.05, 0.4, K)
        neg = rng.random(K) < neg_share
        D[:, g] = np.where(neg, -0.05, share) * np.abs(rest) / max(len(others), 1)
    if dims.nx_col != dims.phi_fd:
        D[:, dims.nx_col] = fd - D.sum(axis=1)
    return IOTable(dims, A, D, V, Y)


def perturb(table: IOTable, rng: np.random.Generator, scale: float = 0.1) -> IOTable:
    """Multiply every cell by exp(N(0, scale)); signs and zeros are kept."""
    def f(a):
        return a * np.exp(rng.normal(0.0, scale, a.shape))
    return IOTable(table.dims, f(table.A), f(table.D), f(table.V), table.Y)


class EconomyStructure:
    """Shared ratio structure of the toy economy."""

    def __init__(self, rng: np.random.Generator, dims: IODimensions):
        K, L, M = dims.K, dims.L, dims.M
        self.dims = dims
        self.mix = rng.uniform(0.3, 1.7, K)
        self.mix /= self.mix.sum()
        C = rng.uniform(0.0, 1.0, (K, K))
        C[rng.random((K, K)) < 0.12] = 0.0
        np.fill_diagonal(C, rng.uniform(0.5, 1.0, K))
        self.coef = C * rng.uniform(0.3, 0.55, K) / C.sum(axis=0)
        vs = rng.uniform(0.2, 1.0, (L, K))
        if L > 1:
            sub = L - 1 if L - 1 != dims.phi_gva else 0
            vs[sub] = -0.03 * vs[sub]
            vs[sub, rng.random(K) < 0.25] = 0.0  # industries without subsidies
        self.va_shares = vs / vs.sum(axis=0)
        w = rng.uniform(0.2, 1.0, K)
        self.phi_weights = w / w.sum()
        self.fd_shares = rng.uniform(0.05, 0.5, (K, M))
        self.fd_shares[:, [dims.phi_fd, dims.nx_col]] = 0.0
        # stock changes: signed, and structurally zero for the last industry
        if M > 3:
            g = [x for x in range(M) if x not in (dims.phi_fd, dims.nx_col)][-1]
            self.fd_shares[:, g] = rng.uniform(-0.02, 0.03, K)
            self.fd_shares[-1, g] = 0.0
        self.output_per_capita = 8.0  # millions per person aged 15+
        self.productivity = rng.uniform(5.0, 30.0, K)  # output per employee
        self.firm_size = rng.uniform(3.0, 40.0, K)

    def table(self, rng: np.random.Generator, pop: float, noise: float) -> IOTable:
        d = self.dims
        K, M = d.K, d.M

        def jitter(a):
            return a * np.exp(rng.normal(0.0, noise, np.shape(a)))

        mix = jitter(self.mix)
        Y = pop * self.output_per_capita * mix / mix.sum()
        A = jitter(self.coef) * Y[None, :]
        V = jitter(self.va_shares)
        V = V / V.sum(axis=0) * (Y - A.sum(axis=0))[None, :]
        D = np.zeros((K, M))
        phi = jitter(self.phi_weights)
        D[:, d.phi_fd] = V[d.phi_gva].sum() * phi / phi.sum()
        fd = Y - A.sum(axis=1) - D[:, d.phi_fd]
        D += jitter(self.fd_shares) * fd[:, None]
        D[:, d.nx_col] = Y - A.sum(axis=1) - D.sum(axis=1) + D[:, d.nx_col]
        return IOTable(d, A, D, V, Y)

    def variables(self, rng: np.random.Generator, table: IOTable, pop: float,
                  noise: float) -> dict[str, np.ndarray]:
        def jitter(a):
            return np.asarray(a) * np.exp(rng.normal(0.0, noise, np.shape(a)))

        emp = jitter(table.Y / self.productivity)
        firms = jitter(emp / self.firm_size)
        lf = jitter(0.6 * pop)
        comp = table.V[1 if self.dims.L > 1 and self.dims.phi_gva != 1 else 0].sum()
        return {
            "SEmp": emp,
            "SFirm": firms,
            "Firm": firms,
            "VA": jitter(table.V.sum(axis=0)),
            "Sales": jitter(table.Y),
            "Income": jitter(np.asarray(comp * 0.9)),
            "TP": jitter(np.asarray(0.5 * pop)),
            "PopLF": lf,
            "Unemp": jitter(0.03 * lf),
        }


def synthetic_economy(seed: int = 0, n_regions: int = 45, n_cities: int = 4,
                      dims: IODimensions = IODimensions(), noise: float = 0.05,
                      target_id: str = "NATION"):
    """Return ``(dataset, target_table)``.

    The dataset holds ``n_regions`` training regions (the last ``n_cities``
    are cities inside earlier regions) plus a target region ``target_id``
    without a table; ``target_table`` is its ground truth.
    """
    rng = np.random.default_rng(seed)
    econ = EconomyStructure(rng, dims)
    regions = []
    n_pref = n_regions - n_cities
    for k in range(n_regions):
        if k < n_pref:
            rid, parent = f"P{k + 1:02d}", None
            pop = float(np.exp(rng.uniform(np.log(5e5), np.log(8e6))))
        else:
            rid, parent = f"C{k - n_pref + 1:02d}", f"P{k - n_pref + 1:02d}"
            pop = float(np.exp(rng.uniform(np.log(2e5), np.log(3e6))))
        pop = round(pop)
        table = econ.table(rng, pop, noise)
        regions.append(RegionRecord(rid, f"Region {rid}", parent, float(pop),
                                    econ.variables(rng, table, pop, noise / 2), table))
    pop = float(round(sum(r.pop15 for r in regions if r.parent_id is None)))
    target_table = econ.table(rng, pop, noise)
    regions.append(RegionRecord(target_id, "Target", None, pop,
                                econ.variables(rng, target_table, pop, noise / 2), None))
    schema = {k: np.shape(v) for k, v in regions[0].variables.items()}
    return RegionDataset(dims, regions, schema), target_table


RUN_CONFIG = """\
# Desk-scale run on the bundled synthetic economy (several minutes on one core).
dataset = dataset
out = out
target_region = NATION
total_output = {total!r}
actual_table = actual_NATION.csv
seed = 0
n_samples = 5000
pca_components = 20
width = 64
n_blocks = 3
dropout_after = 2
batch_size = 128
max_epochs = 30
patience = 5
figures = svg
"""

BASELINE_CONFIG = """\
# Conventional baseline: balance a prior table to known gross outputs.
mode = baseline
dataset = dataset
out = out_baseline
prior_table = perturbed.csv
gross_outputs = gross_outputs.csv
actual_table = actual_NATION.csv
"""


def write_example(root, seed: int = 0) -> None:
    """Write the bundled example: dataset, ground truth, run configs and a
    perturbed table with its balanced golden output."""
    from pathlib import Path

    from .balancing import balance
    from .pipeline import write_gross_outputs
    from .table_model import write_io_table, write_region_dataset

    root = Path(root)
    dataset, target = synthetic_economy(seed)
    write_region_dataset(dataset, root / "dataset")
    write_io_table(target, root / "actual_NATION.csv")
    (root / "run.cfg").write_text(RUN_CONFIG.format(total=target.total), encoding="utf-8")
    (root / "baseline.cfg").write_text(BASELINE_CONFIG, encoding="utf-8")
    prior = perturb(target, np.random.default_rng(seed + 1), 0.1)
    write_io_table(prior, root / "perturbed.csv")
    write_gross_outputs(target.Y, root / "gross_outputs.csv")
    write_io_table(balance(prior, target.Y, target.total), root / "balanced_golden.csv")
