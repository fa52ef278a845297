"""Shared helpers: finite observation tables with exactly known truths.

A table is an explicit probability distribution over (z, d, y) atoms, so
population quantities are exact sums and true nuisances follow from
conditional expectations computed by enumeration.
"""

import numpy as np
import pytest

from bifdr.model import Dataset, FiniteTable

Y_SUPPORT = (-1.0, 0.5, 2.0)


def make_table(rng, n_z=3, d_dim=2, y_support=Y_SUPPORT):
    """Random finite table over (z_atom, d, y) with strictly positive mass."""
    z_atoms = rng.normal(size=(n_z, d_dim)).round(2)
    rows_z, rows_d, rows_y, probs = [], [], [], []
    for i in range(n_z):
        for d in (0.0, 1.0):
            for y in y_support:
                rows_z.append(z_atoms[i])
                rows_d.append(d)
                rows_y.append(y)
                probs.append(rng.uniform(0.05, 1.0))
    probs = np.asarray(probs)
    probs /= probs.sum()
    data = Dataset({"y": np.asarray(rows_y), "d": np.asarray(rows_d)},
                   np.asarray(rows_z))
    return FiniteTable(data=data, probs=probs)


def _conditional(table, values, given=None):
    """E[values | z atom] (optionally restricted by a 0/1 mask) per atom."""
    z = table.data.z
    atoms, idx = np.unique(z, axis=0, return_inverse=True)
    out = np.zeros(len(atoms))
    mask = np.ones(table.data.n) if given is None else given
    for k in range(len(atoms)):
        sel = (idx == k).astype(float) * mask
        denom = float(table.probs @ sel)
        out[k] = float(table.probs @ (sel * values)) / denom
    return atoms, out


def atomwise(atoms, vals):
    """Wrap per-atom values as a nuisance function of z."""
    def fn(zpts):
        zpts = np.asarray(zpts, dtype=float)
        out = np.empty(zpts.shape[0])
        for i, row in enumerate(zpts):
            match = np.all(atoms == row, axis=1)
            out[i] = vals[np.argmax(match)]
        return out

    return fn


def true_nuisances(table, functional):
    """Exact (a, b) callables for the shipped simple functionals."""
    y = table.data.col("y")
    d = table.data.col("d")
    if functional == "mar_mean":
        atoms, a = _conditional(table, y, given=d)
        _, pi = _conditional(table, d)
        return atomwise(atoms, a), atomwise(atoms, 1.0 / pi)
    if functional == "mar_nonrespondents":
        atoms, a = _conditional(table, y, given=d)
        _, pi = _conditional(table, d)
        return atomwise(atoms, a), atomwise(atoms, (1.0 - pi) / pi)
    if functional == "ecc":
        atoms, a = _conditional(table, y)
        _, mu_d = _conditional(table, d)
        return atomwise(atoms, a), atomwise(atoms, -mu_d)
    if functional == "expected_product":
        atoms, a = _conditional(table, y)
        _, mu_d = _conditional(table, d)
        return atomwise(atoms, a), atomwise(atoms, mu_d)
    raise KeyError(functional)


def table_as_dataset(table, copies_unit=1):
    """A Dataset whose empirical measure approximates the table.

    With probabilities that are multiples of 1/N the approximation is exact;
    here the rounding error is at most one row per atom and only tests that
    need exact equality construct rational tables themselves.
    """
    counts = np.round(table.probs * copies_unit).astype(int)
    idx = np.repeat(np.arange(table.data.n), counts)
    return table.data.subset(idx)


def rational_table(rng, n_z=2, d_dim=1, denom=32):
    """Table whose probabilities are multiples of 1/denom (all atoms kept)."""
    base = make_table(rng, n_z=n_z, d_dim=d_dim)
    counts = rng.integers(1, 6, size=base.data.n)
    probs = counts / counts.sum()
    # rescale to an exact rational grid
    counts = np.maximum(np.round(probs * denom).astype(int), 1)
    probs = counts / counts.sum()
    table = FiniteTable(data=base.data, probs=probs)
    return table, counts


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
