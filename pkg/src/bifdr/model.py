"""Domain types: observations, basis expansions, and the functional registry.

A functional is described by the statistics (s_ab, s_0) and two maps
m_a(O, h), m_b(O, h) that are linear in a function h of the covariates.
The one-step kernel is

    Upsilon(a, b) = s_ab * a(z) * b(z) + m_a(O, a) + m_b(O, b) + s_0

and every estimator in this package is an average of Upsilon evaluated at
cross-fitted nuisances.
"""

from __future__ import annotations

import csv
import weakref
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "Basis",
    "FunctionalSpec",
    "EstimandTruth",
    "FiniteTable",
    "registry_get",
    "registry_names",
    "eval_upsilon",
    "mixed_bias_gap",
    "gauss_legendre_grid",
]

_Array = np.ndarray
# A nuisance function: maps an (m, d) array of covariate points to (m,) values.
ZFunc = Callable[[_Array], _Array]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    """n observations: named scalar fields plus a covariate matrix z (n x d).

    Immutable after construction; all values must be finite.
    """

    fields: Mapping[str, _Array]
    z: _Array

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 2:
            raise DataError("z must be a 2-d array (n rows, d covariates)")
        n = z.shape[0]
        if n < 1:
            raise DataError("dataset needs at least one row")
        if not np.all(np.isfinite(z)):
            raise DataError("non-finite value in covariates z")
        cols = {}
        for name, col in self.fields.items():
            col = np.asarray(col, dtype=float)
            if col.shape != (n,):
                raise DataError(
                    f"field {name!r} has shape {col.shape}, expected ({n},)"
                )
            if not np.all(np.isfinite(col)):
                raise DataError(f"non-finite value in field {name!r}")
            cols[name] = col
        object.__setattr__(self, "fields", cols)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    def col(self, name: str) -> _Array:
        try:
            return self.fields[name]
        except KeyError:
            raise DataError(
                f"dataset has no field {name!r}; available: {sorted(self.fields)}"
            ) from None

    def subset(self, idx: _Array) -> "Dataset":
        return Dataset({k: v[idx] for k, v in self.fields.items()}, self.z[idx])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Read `field1,...,fieldk,z1,...,zd` CSV (UTF-8, decimal-point floats)."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            zcols = [h for h in header if h.startswith("z") and h[1:].isdigit()]
            if not zcols:
                raise DataError(f"{path}: no covariate columns z1..zd in header")
            if zcols != [f"z{i}" for i in range(1, len(zcols) + 1)]:
                raise DataError(f"{path}: covariate columns must be named z1..zd in order")
            fieldnames = [h for h in header if h not in zcols]
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {len(header)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    bad = next(i for i, v in enumerate(row) if not _is_float(v))
                    raise DataError(
                        f"{path}: row {lineno}, column {header[bad]!r}: {exc}"
                    ) from None
        if not rows:
            raise DataError(f"{path}: no data rows")
        mat = np.asarray(rows, dtype=float)
        col_of = {h: i for i, h in enumerate(header)}
        fields = {name: mat[:, col_of[name]] for name in fieldnames}
        z = mat[:, [col_of[c] for c in zcols]]
        return cls(fields, z)

    def to_csv(self, path) -> None:
        names = list(self.fields)
        header = names + [f"z{i}" for i in range(1, self.d + 1)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n):
                writer.writerow(
                    [repr(float(self.fields[k][i])) for k in names]
                    + [repr(float(v)) for v in self.z[i]]
                )


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


@dataclass(frozen=True)
class Basis:
    """A basis expansion phi: covariate vectors -> R^p."""

    p: int
    eval: Callable[[_Array], _Array]

    @staticmethod
    def identity(d: int) -> "Basis":
        """phi(z) = z; the raw-covariate basis used in the simulations."""
        return Basis(p=d, eval=lambda zpts: np.asarray(zpts, dtype=float))


@dataclass(frozen=True)
class FunctionalSpec:
    """One estimand: statistics s_ab, s_0 and the linear maps m_a, m_b.

    s_ab/s_0 map a Dataset to per-row values; m_a/m_b map (Dataset, h) to
    per-row values, linearly in the covariate function h.  ``sign``
    declares the a.s. sign of s_ab ("nonnegative" or "nonpositive").
    """

    name: str
    s_ab: Callable[[Dataset], _Array]
    s_0: Callable[[Dataset], _Array]
    m_a: Callable[[Dataset, ZFunc], _Array]
    m_b: Callable[[Dataset, ZFunc], _Array]
    sign: str


@dataclass(frozen=True)
class EstimandTruth:
    """Ground-truth functional value for a synthetic data generating process."""

    chi: float
    method: str  # "closed_form" | "monte_carlo"
    oracle_draws: int | None = None
    oracle_seed: int | None = None

    def __post_init__(self):
        if self.method == "monte_carlo" and (
            self.oracle_draws is None or self.oracle_seed is None
        ):
            raise ValueError("monte_carlo truths must record oracle_draws and oracle_seed")


@dataclass(frozen=True)
class FiniteTable:
    """An explicit finite probability table over observations."""

    data: Dataset
    probs: _Array

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (self.data.n,):
            raise DataError("probs must have one entry per observation")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DataError("probs must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    def mean(self, values: _Array) -> float:
        return float(self.probs @ values)


class _ByIdCache:
    """Memoize derived arrays per Dataset identity without keeping it alive."""

    def __init__(self):
        self._entries: dict[int, tuple] = {}

    def get(self, obj, build):
        key = id(obj)
        hit = self._entries.get(key)
        if hit is not None and hit[0]() is obj:
            return hit[1]
        if len(self._entries) > 64:
            self._entries = {k: v for k, v in self._entries.items() if v[0]() is not None}
        val = build(obj)
        self._entries[key] = (weakref.ref(obj), val)
        return val


def gauss_legendre_grid(n_nodes: int = 64, lo: float = 0.0, hi: float = 1.0):
    """Gauss-Legendre nodes/weights on [lo, hi]."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * w
    return nodes, weights


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def _mar_like(name: str, respondents: bool) -> FunctionalSpec:
    # Mean of a missing-at-random outcome: O = (DY, D, Z).  The y column is
    # only meaningful where d = 1; it enters every statistic multiplied by d.
    def m_a(data, h):
        ha = h(data.z)
        return ha if respondents else (1.0 - data.col("d")) * ha

    return FunctionalSpec(
        name=name,
        s_ab=lambda data: -data.col("d"),
        s_0=lambda data: np.zeros(data.n),
        m_a=m_a,
        m_b=lambda data, h: data.col("d") * data.col("y") * h(data.z),
        sign="nonpositive",
    )


def _ecc() -> FunctionalSpec:
    return FunctionalSpec(
        name="ecc",
        s_ab=lambda data: -np.ones(data.n),
        s_0=lambda data: data.col("d") * data.col("y"),
        m_a=lambda data, h: -data.col("d") * h(data.z),
        m_b=lambda data, h: data.col("y") * h(data.z),
        sign="nonpositive",
    )


def _expected_product() -> FunctionalSpec:
    # chi = E[a(Z) b(Z)] with a = E(Y|Z), b = E(D|Z): the simulation estimand.
    return FunctionalSpec(
        name="expected_product",
        s_ab=lambda data: -np.ones(data.n),
        s_0=lambda data: np.zeros(data.n),
        m_a=lambda data, h: data.col("d") * h(data.z),
        m_b=lambda data, h: data.col("y") * h(data.z),
        sign="nonpositive",
    )


def _mnar_mean(delta: float) -> FunctionalSpec:
    # Exponential-tilt sensitivity functional.  exp(delta*y) is only ever
    # used on rows with d = 1, so mask before exponentiating.
    def _tilt(data):
        d = data.col("d")
        return np.where(d > 0, np.exp(delta * data.col("y") * (d > 0)), 0.0)

    return FunctionalSpec(
        name="mnar_mean",
        s_ab=lambda data: -data.col("d") * _tilt(data),
        s_0=lambda data: data.col("d") * data.col("y"),
        m_a=lambda data, h: (1.0 - data.col("d")) * h(data.z),
        m_b=lambda data, h: data.col("d") * data.col("y") * _tilt(data) * h(data.z),
        sign="nonpositive",
    )


def _continuous_treatment(weight_fn, nodes=None, weights=None) -> FunctionalSpec:
    # O = (Y, D, L) with Z = (D, L): the treatment is the first covariate
    # coordinate.  m_a integrates h over treatment values against weight_fn.
    if nodes is None or weights is None:
        nodes, weights = gauss_legendre_grid(64)
    nodes = np.asarray(nodes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    wvals = np.asarray(weight_fn(nodes), dtype=float)
    integral = float(weights @ wvals)
    if abs(integral) > 1e-8:
        raise ValueError(
            f"continuous_treatment weight function must integrate to 0 on the grid "
            f"(got {integral:.3e})"
        )
    cache = _ByIdCache()

    def _points(data):
        pts = []
        for u in nodes:
            zu = data.z.copy()
            zu[:, 0] = u
            pts.append(zu)
        return pts

    def m_a(data, h):
        out = np.zeros(data.n)
        for gw, wv, zu in zip(weights, wvals, cache.get(data, _points)):
            out += gw * wv * h(zu)
        return out

    return FunctionalSpec(
        name="continuous_treatment",
        s_ab=lambda data: -np.ones(data.n),
        s_0=lambda data: np.zeros(data.n),
        m_a=m_a,
        m_b=lambda data, h: data.col("y") * h(data.z),
        sign="nonpositive",
    )


def _policy_effect(transform) -> FunctionalSpec:
    # Average policy effect of d -> transform(d); Z = (D, L) as above.  The
    # density ratio only defines the true b(Z); the fitted b-model needs no
    # density estimate.
    cache = _ByIdCache()

    def _points(data):
        zt = data.z.copy()
        zt[:, 0] = transform(zt[:, 0])
        return zt

    return FunctionalSpec(
        name="policy_effect",
        s_ab=lambda data: -np.ones(data.n),
        s_0=lambda data: -data.col("y"),
        m_a=lambda data, h: h(cache.get(data, _points)),
        m_b=lambda data, h: data.col("y") * h(data.z),
        sign="nonpositive",
    )


def _ratio_functional(nodes=None, weights=None) -> FunctionalSpec:
    # chi = integral of a(z) over [0, 1] with a = E(Y1|Z)/E(Y2|Z); z scalar.
    if nodes is None or weights is None:
        nodes, weights = gauss_legendre_grid(64)
    nodes = np.asarray(nodes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    cache = _ByIdCache()

    def _points(data):
        return [np.full((data.n, data.d), u) for u in nodes]

    def m_a(data, h):
        out = np.zeros(data.n)
        for gw, zu in zip(weights, cache.get(data, _points)):
            out += gw * h(zu)
        return out

    return FunctionalSpec(
        name="ratio_functional",
        s_ab=lambda data: -data.col("y2"),
        s_0=lambda data: np.zeros(data.n),
        m_a=m_a,
        m_b=lambda data, h: data.col("y1") * h(data.z),
        sign="nonpositive",
    )


_SIMPLE = {
    "mar_mean": lambda: _mar_like("mar_mean", respondents=True),
    "mar_nonrespondents": lambda: _mar_like("mar_nonrespondents", respondents=False),
    # One arm of the average treatment effect; the ATE is the difference of
    # two arms (see crossfit.estimate_ate).
    "ate_arm": lambda: _mar_like("ate_arm", respondents=True),
    "ecc": _ecc,
    "expected_product": _expected_product,
}


def registry_names() -> tuple[str, ...]:
    return tuple(_SIMPLE) + (
        "mnar_mean",
        "continuous_treatment",
        "policy_effect",
        "ratio_functional",
    )


def registry_get(name: str, *, delta: float | None = None, weight_fn=None,
                 transform=None, nodes=None, weights=None) -> FunctionalSpec:
    """Return a shipped functional by name.

    mnar_mean requires ``delta``; continuous_treatment requires ``weight_fn``
    (with optional quadrature ``nodes``/``weights``); policy_effect requires
    ``transform``.
    """
    if name in _SIMPLE:
        return _SIMPLE[name]()
    if name == "mnar_mean":
        if delta is None:
            raise ValueError("mnar_mean requires the tilt constant delta")
        return _mnar_mean(delta)
    if name == "continuous_treatment":
        if weight_fn is None:
            raise ValueError("continuous_treatment requires a contrast weight function")
        return _continuous_treatment(weight_fn, nodes, weights)
    if name == "policy_effect":
        if transform is None:
            raise ValueError("policy_effect requires the treatment transform t(.)")
        return _policy_effect(transform)
    if name == "ratio_functional":
        return _ratio_functional(nodes, weights)
    raise KeyError(f"unknown functional {name!r}; shipped: {', '.join(registry_names())}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def eval_upsilon(spec: FunctionalSpec, a: ZFunc, b: ZFunc, data: Dataset) -> _Array:
    """Per-row one-step kernel s_ab*a*b + m_a(O,a) + m_b(O,b) + s_0."""
    az = np.asarray(a(data.z), dtype=float)
    bz = np.asarray(b(data.z), dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        terms = {
            "s_ab*a*b": spec.s_ab(data) * az * bz,
            "m_a": np.asarray(spec.m_a(data, a), dtype=float),
            "m_b": np.asarray(spec.m_b(data, b), dtype=float),
            "s_0": spec.s_0(data),
        }
    for tname, vals in terms.items():
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite value in Upsilon term {tname!r}")
    return terms["s_ab*a*b"] + terms["m_a"] + terms["m_b"] + terms["s_0"]


def _check_truth(spec: FunctionalSpec, a: ZFunc, b: ZFunc, table: FiniteTable,
                 tol: float = 1e-10) -> None:
    # Zero-moment conditions at the truth, checked exactly on the table with
    # h ranging over indicators of the distinct covariate atoms (these span
    # all functions of z on a finite table).
    data, pr = table.data, table.probs
    s = spec.s_ab(data)
    az = np.asarray(a(data.z), dtype=float)
    bz = np.asarray(b(data.z), dtype=float)
    _, atom_idx = np.unique(data.z, axis=0, return_inverse=True)
    for k in range(atom_idx.max() + 1):
        mask = (atom_idx == k).astype(float)
        h = _atom_indicator(data.z, mask)
        m_bh = np.asarray(spec.m_b(data, h), dtype=float)
        m_ah = np.asarray(spec.m_a(data, h), dtype=float)
        if abs(pr @ (s * az * h(data.z) + m_bh)) > tol or \
           abs(pr @ (s * bz * h(data.z) + m_ah)) > tol:
            raise ValueError("supplied (a,b) are not the truth under P")


def _atom_indicator(z_atoms: _Array, mask: _Array) -> ZFunc:
    ref = z_atoms

    def h(zpts):
        zpts = np.asarray(zpts, dtype=float)
        out = np.zeros(zpts.shape[0])
        sel = np.flatnonzero(mask)
        if sel.size:
            target = ref[sel[0]]
            out[np.all(zpts == target, axis=1)] = 1.0
        return out

    return h


def mixed_bias_gap(spec: FunctionalSpec, a: ZFunc, b: ZFunc, a2: ZFunc, b2: ZFunc,
                   table: FiniteTable) -> tuple[float, float]:
    """Both sides of the mixed-bias identity, as exact sums over the table.

    lhs = E_P[Upsilon(a', b')] - chi(P); rhs = E_P[s_ab (a'-a)(b'-b)].
    (a, b) must be the true nuisances under P.
    """
    _check_truth(spec, a, b, table)
    data, pr = table.data, table.probs
    chi = table.mean(eval_upsilon(spec, a, b, data))
    lhs = table.mean(eval_upsilon(spec, a2, b2, data)) - chi
    s = spec.s_ab(data)
    da = np.asarray(a2(data.z), float) - np.asarray(a(data.z), float)
    db = np.asarray(b2(data.z), float) - np.asarray(b(data.z), float)
    rhs = float(pr @ (s * da * db))
    return lhs, rhs
