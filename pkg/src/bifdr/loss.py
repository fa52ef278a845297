"""Convex nuisance objective L(theta) = P_n[Q(theta)] and its gradient.

For a target c in {a, b} with link psi' = phi and weight w(z), the per-row
objective is

    Q_c(theta) = s_ab * w * psi(<theta, x>) + <theta, m_cbar(O, w * phi)>

where x = phi(z) and cbar is the other nuisance.  Q is linear in w and in
s_ab, so its overall orientation depends on their signs: we fold that into
a single sign flip chosen so that the stored objective is convex, and
minimize it.  The stored weight vector is always positive; a negative
evaluated weight (e.g. the derivative of a decreasing link) flips the
orientation instead.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .links import LinkFunction
from .model import Basis, Dataset, FunctionalSpec

__all__ = ["LossProblem", "build_loss", "loss_value", "loss_grad"]

_Array = np.ndarray


@dataclass(frozen=True)
class LossProblem:
    """Immutable data for one penalized nuisance fit.

    m_rows[i, j] holds m_cbar(O_i, w * phi_j); its column means form the
    theta-free linear term M.  ``sign_flip`` orients the objective so it is
    convex.  ``gram`` caches sign_flip * X' diag(s*w) X / n for the identity
    link, where the objective is exactly quadratic.
    """

    x: _Array          # (n, p) design, x[i, j] = phi_j(z_i)
    s_ab: _Array       # (n,)
    w: _Array          # (n,), strictly positive
    m_rows: _Array     # (n, p)
    link: LinkFunction
    target: str
    sign_flip: float
    penalized: _Array  # (p,) bool mask; False = unpenalized coordinate
    gram: _Array | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> _Array:
        """The linear term M (column means of m_rows); computed once."""
        cached = self.__dict__.get("_m")
        if cached is None:
            cached = self.m_rows.mean(axis=0)
            object.__setattr__(self, "_m", cached)
        return cached

    def value(self, theta: _Array) -> float:
        if self.gram is not None:
            gt = self.gram @ theta
            return float(0.5 * theta @ gt + self.sign_flip * (self.m @ theta))
        u = self.x @ theta
        ridge = float(np.mean(self.s_ab * self.w * self.link.antideriv(u)))
        return self.sign_flip * (ridge + float(self.m @ theta))

    def grad(self, theta: _Array) -> _Array:
        if self.gram is not None:
            return self.gram @ theta + self.sign_flip * self.m
        u = self.x @ theta
        r = self.s_ab * self.w * self.link.value(u)
        return self.sign_flip * (self.x.T @ r / self.n + self.m)

    def subset(self, idx: _Array) -> "LossProblem":
        """Restrict the empirical measure to the given rows."""
        sub = replace(
            self,
            x=self.x[idx],
            s_ab=self.s_ab[idx],
            w=self.w[idx],
            m_rows=self.m_rows[idx],
            gram=None,
        )
        if self.gram is not None:
            object.__setattr__(sub, "gram", _identity_gram(sub))
        return sub


def _identity_gram(problem: LossProblem) -> _Array:
    sw = problem.sign_flip * problem.s_ab * problem.w
    return (problem.x * sw[:, None]).T @ problem.x / problem.n


def build_loss(spec: FunctionalSpec, dataset: Dataset, basis: Basis, target: str,
               link: LinkFunction, weight_fn: Callable[[_Array], _Array] | None = None,
               intercept: bool = False) -> LossProblem:
    """Assemble the penalized-fit data for one nuisance target.

    ``weight_fn`` maps covariate points to weights (default: constant 1).
    Weights must be nonzero and share one sign over the sample.  With
    ``intercept=True`` an unpenalized constant column is prepended.
    """
    if target not in ("a", "b"):
        raise ValueError("target must be 'a' or 'b'")
    s = np.asarray(spec.s_ab(dataset), dtype=float)
    bad = np.flatnonzero(s > 0) if spec.sign == "nonpositive" else np.flatnonzero(s < 0)
    if bad.size:
        raise ValueError(
            f"s_ab violates declared sign {spec.sign!r} first at row {bad[0]}"
        )

    phi = np.asarray(basis.eval(dataset.z), dtype=float)
    if phi.shape != (dataset.n, basis.p):
        raise ValueError(f"basis returned shape {phi.shape}, expected {(dataset.n, basis.p)}")

    if weight_fn is None:
        wraw = np.ones(dataset.n)
        weight_fn = _const_one
    else:
        wraw = np.asarray(weight_fn(dataset.z), dtype=float)
    if np.any(wraw == 0) or not np.all(np.isfinite(wraw)):
        raise ValueError("weights must be finite and nonzero")
    if np.any(wraw > 0) and np.any(wraw < 0):
        raise ValueError("weights must share one sign over the sample")
    w_sign = 1.0 if wraw[0] > 0 else -1.0
    w = np.abs(wraw)

    # Per-row values of m_cbar(O_i, |w| * phi_j).  The closure caches basis
    # and weight evaluations per evaluation-point array, so m-maps that probe
    # transformed covariates (quadrature nodes, policy shifts) stay cheap.
    m_map = spec.m_b if target == "a" else spec.m_a
    cache: dict[int, tuple] = {}

    def _lookup(zpts):
        key = id(zpts)
        hit = cache.get(key)
        if hit is None or hit[0] is not zpts:
            if zpts is dataset.z:
                vals = (zpts, phi, w)
            else:
                zarr = np.asarray(zpts, dtype=float)
                vals = (zpts, np.asarray(basis.eval(zarr), float),
                        np.abs(np.asarray(weight_fn(zarr), float)))
            cache[key] = vals
            hit = vals
        return hit

    m_rows = np.empty((dataset.n, basis.p))
    for j in range(basis.p):
        def h(zpts, _j=j):
            _, phiv, wv = _lookup(zpts)
            return wv * phiv[:, _j]

        m_rows[:, j] = m_map(dataset, h)
    if not np.all(np.isfinite(m_rows)):
        raise ValueError("non-finite value while building the linear term M")

    s_sign = 1.0 if spec.sign == "nonnegative" else -1.0
    eff = s_sign * w_sign
    compat = 1.0 if link.compatible_sign == "nonnegative" else -1.0
    sign_flip = 1.0 if eff == compat else -1.0

    penalized = np.ones(basis.p, dtype=bool)
    if intercept:
        phi = np.column_stack([np.ones(dataset.n), phi])
        m_rows = np.column_stack([m_map(dataset, lambda zp: _lookup(zp)[2]), m_rows])
        penalized = np.concatenate([[False], penalized])

    problem = LossProblem(
        x=phi, s_ab=s, w=w, m_rows=m_rows, link=link, target=target,
        sign_flip=sign_flip, penalized=penalized,
    )
    if link.name == "identity":
        object.__setattr__(problem, "gram", _identity_gram(problem))
    return problem


def _const_one(zpts):
    return np.ones(np.asarray(zpts).shape[0])


def loss_value(problem: LossProblem, theta: _Array) -> float:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (problem.p,) or not np.all(np.isfinite(theta)):
        raise ValueError(f"theta must be a finite vector of length {problem.p}")
    v = problem.value(theta)
    if not np.isfinite(v):
        raise FloatingPointError("loss value overflowed after clamping")
    return v


def loss_grad(problem: LossProblem, theta: _Array) -> _Array:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (problem.p,) or not np.all(np.isfinite(theta)):
        raise ValueError(f"theta must be a finite vector of length {problem.p}")
    g = problem.grad(theta)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("loss gradient overflowed after clamping")
    return g
