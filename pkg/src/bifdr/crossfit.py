"""Sample splitting, nuisance fitting, cross-fitting, and Wald intervals.

Three estimation routines, selected by the links of the two working models:

* ``estimate_lin``    -- both links identity; 2 folds, weight 1 everywhere.
* ``estimate_nonlin`` -- both links non-linear; 3 folds, two-stage fits whose
  second-stage weights are the other link's derivative at a first-stage fit
  from a different fold, then coefficient averaging.
* ``estimate_mix``    -- identity a-link, non-linear b-link; 3 folds, b fitted
  once per complement, a fitted per nuisance fold with derivative weights.

Every routine returns the fold-averaged one-step estimate, the pooled
within-fold variance of the one-step kernel, and full fit bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .links import CLAMP_ARG, LinkFunction, link
from .loss import build_loss
from .model import Basis, Dataset, FunctionalSpec
from .solver import (
    FitConfig,
    LambdaCV,
    LambdaRate,
    PenalizedFit,
    SolverError,
    assign_folds,
    fit_l1,
)

__all__ = [
    "FoldPlan",
    "CrossfitEstimate",
    "split_folds",
    "estimate_lin",
    "estimate_nonlin",
    "estimate_mix",
    "estimate_auto",
    "estimate_ate",
    "wald_ci",
]

_Array = np.ndarray


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: _Array
    seed: int

    def __post_init__(self):
        if self.k not in (2, 3):
            raise ValueError("estimation uses 2 or 3 folds")
        counts = np.bincount(self.assignment, minlength=self.k)
        if len(counts) != self.k or counts.max() - counts.min() > 1:
            raise ValueError("fold sizes must differ by at most 1")

    def fold(self, k: int) -> _Array:
        return np.flatnonzero(self.assignment == k)

    def complement(self, k: int) -> _Array:
        return np.flatnonzero(self.assignment != k)


def split_folds(n: int, k: int, seed: int) -> FoldPlan:
    """Random disjoint folds covering all rows, sizes within 1 of each other."""
    if n < 2 * k:
        raise ValueError(f"need n >= 2k rows to split (n={n}, k={k})")
    return FoldPlan(k=k, assignment=assign_folds(n, k, seed), seed=seed)


@dataclass
class CrossfitEstimate:
    """Point estimate, kernel variance, and per-fold / per-fit bookkeeping.

    v_hat estimates the variance of the one-step kernel Upsilon (not of
    chi_hat); the Wald interval is chi_hat +/- z * sqrt(v_hat / n).
    """

    algorithm: str
    functional: str
    chi_hat: float
    v_hat: float
    n: int
    per_fold_chi: _Array
    seed: int
    lambda_per_fit: list[float]
    kkt_residual_per_fit: list[float]
    clamped_rows: int
    fold_plan: FoldPlan
    fits: dict[str, PenalizedFit] = field(repr=False)
    upsilon_per_fold: list[_Array] = field(repr=False)

    def se(self) -> float:
        return float(np.sqrt(self.v_hat / self.n))

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        return wald_ci(self.chi_hat, self.v_hat, self.n, level)

    def to_json_dict(self, ci_level: float = 0.95) -> dict:
        lo, hi = self.ci(ci_level)
        return {
            "algorithm": self.algorithm,
            "functional": self.functional,
            "chi_hat": self.chi_hat,
            "v_hat": self.v_hat,
            "n": self.n,
            "ci_level": ci_level,
            "ci": [lo, hi],
            "per_fold_chi": [float(c) for c in self.per_fold_chi],
            "lambda_per_fit": self.lambda_per_fit,
            "kkt_residual_per_fit": self.kkt_residual_per_fit,
            "clamped_rows": self.clamped_rows,
            "seed": self.seed,
        }


def wald_ci(chi_hat: float, v_hat: float, n: int, level: float = 0.95):
    """Normal-theory interval chi_hat +/- z_{(1+level)/2} * sqrt(v_hat / n)."""
    if v_hat < 0:
        raise ValueError("v_hat must be nonnegative")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    half = norm.ppf((1.0 + level) / 2.0) * np.sqrt(v_hat / n)
    return float(chi_hat - half), float(chi_hat + half)


class _FitLog:
    """Deterministic per-fit bookkeeping and seed derivation."""

    def __init__(self, config: FitConfig):
        self.config = config
        self.fits: dict[str, PenalizedFit] = {}
        self.order: list[str] = []
        self.clamped = 0

    def run(self, name: str, problem) -> PenalizedFit:
        cfg = FitConfig(
            lam=self.config.lam, tol_kkt=self.config.tol_kkt,
            max_iter=self.config.max_iter, backtrack_beta=self.config.backtrack_beta,
            seed=_derived_seed(self.config.seed, len(self.order)),
        )
        try:
            fit = fit_l1(problem, cfg)
        except SolverError as exc:
            raise SolverError(f"nuisance fit {name!r}: {exc}") from exc
        self.fits[name] = fit
        self.order.append(name)
        return fit

    def lambdas(self):
        return [self.fits[k].lambda_used for k in self.order]

    def residuals(self):
        return [self.fits[k].kkt_residual for k in self.order]


def _derived_seed(master: int, index: int) -> list[int]:
    # np.random.default_rng accepts sequences; (master, index) gives
    # schedule-independent per-fit streams.
    return [int(master) & 0xFFFFFFFF, index]


def _nuisance_fn(basis: Basis, lk: LinkFunction, theta: _Array):
    def fn(zpts):
        return lk.value(np.asarray(basis.eval(np.asarray(zpts, float)), float) @ theta)

    return fn


def _deriv_weight(basis: Basis, lk: LinkFunction, theta: _Array, log: "_FitLog"):
    def fn(zpts):
        u = np.asarray(basis.eval(np.asarray(zpts, float)), float) @ theta
        log.clamped += int(np.count_nonzero(np.abs(u) > CLAMP_ARG))
        return lk.deriv(u)

    return fn


def _finish(algorithm, spec, dataset, config, plan, log, fold_chis, fold_ups):
    per_fold = np.asarray(fold_chis)
    chi_hat = float(per_fold.mean())
    v_hat = float(np.mean([np.mean((u - c) ** 2) for u, c in zip(fold_ups, fold_chis)]))
    return CrossfitEstimate(
        algorithm=algorithm, functional=spec.name, chi_hat=chi_hat, v_hat=v_hat,
        n=dataset.n, per_fold_chi=per_fold, seed=config.seed,
        lambda_per_fit=log.lambdas(), kkt_residual_per_fit=log.residuals(),
        clamped_rows=log.clamped, fold_plan=plan, fits=log.fits,
        upsilon_per_fold=fold_ups,
    )


def _upsilon_from_eval(spec, data, a_fn, b_fn):
    from .model import eval_upsilon

    return eval_upsilon(spec, a_fn, b_fn, data)


def estimate_lin(spec: FunctionalSpec, dataset: Dataset, basis: Basis,
                 config: FitConfig, plan: FoldPlan | None = None) -> CrossfitEstimate:
    """Cross-fitted one-step estimator with two identity-link nuisances."""
    identity = link("identity")
    if plan is None:
        plan = split_folds(dataset.n, 2, config.seed)
    log = _FitLog(config)
    fold_chis, fold_ups = [], []
    for k in range(plan.k):
        train = dataset.subset(plan.complement(k))
        theta = {}
        for c in ("a", "b"):
            prob = build_loss(spec, train, basis, c, identity)
            theta[c] = log.run(f"{c}_comp{k}", prob).theta
        est = dataset.subset(plan.fold(k))
        ups = _upsilon_from_eval(
            spec, est,
            _nuisance_fn(basis, identity, theta["a"]),
            _nuisance_fn(basis, identity, theta["b"]),
        )
        fold_ups.append(ups)
        fold_chis.append(float(ups.mean()))
    return _finish("lin", spec, dataset, config, plan, log, fold_chis, fold_ups)


def _others(k: int) -> tuple[int, int]:
    # Ordered pair of the other two fold indices (0-based analogue of
    # j1(2)=1, j2(2)=3 in 1-based labels).
    rest = [j for j in range(3) if j != k]
    return rest[0], rest[1]


def estimate_nonlin(spec: FunctionalSpec, dataset: Dataset, basis: Basis,
                    link_a: LinkFunction, link_b: LinkFunction, config: FitConfig,
                    plan: FoldPlan | None = None) -> CrossfitEstimate:
    """Three-fold estimator when both links are non-linear.

    Stage 1 fits both nuisances per fold with unit weight.  Stage 2 refits
    each nuisance on a fold using, as weight, the other link's derivative
    at the stage-1 fit from one of the remaining folds; the two stage-2
    coefficient vectors feeding an estimation fold are averaged.
    """
    if link_a.name == "identity" or link_b.name == "identity":
        raise ValueError("estimate_nonlin requires two non-identity links")
    links = {"a": link_a, "b": link_b}
    if plan is None:
        plan = split_folds(dataset.n, 3, config.seed)
    log = _FitLog(config)
    folds = [dataset.subset(plan.fold(k)) for k in range(3)]

    stage1 = {}  # (c, k) -> theta0
    for k in range(3):
        for c in ("a", "b"):
            prob = build_loss(spec, folds[k], basis, c, links[c])
            stage1[(c, k)] = log.run(f"{c}0_fold{k}", prob).theta
    stage2 = {}  # (c, k, j) -> theta fitted on fold k with weights from fold j
    for c in ("a", "b"):
        cbar = "b" if c == "a" else "a"
        for k in range(3):
            for j in _others(k):
                wfn = _deriv_weight(basis, links[cbar], stage1[(cbar, j)], log)
                prob = build_loss(spec, folds[k], basis, c, links[c], wfn)
                stage2[(c, k, j)] = log.run(f"{c}_fold{k}_w{j}", prob).theta

    fold_chis, fold_ups = [], []
    for k in range(3):
        j1, j2 = _others(k)
        theta_bar = {
            c: 0.5 * (stage2[(c, j1, j2)] + stage2[(c, j2, j1)]) for c in ("a", "b")
        }
        ups = _upsilon_from_eval(
            spec, folds[k],
            _nuisance_fn(basis, link_a, theta_bar["a"]),
            _nuisance_fn(basis, link_b, theta_bar["b"]),
        )
        fold_ups.append(ups)
        fold_chis.append(float(ups.mean()))
    return _finish("nonlin", spec, dataset, config, plan, log, fold_chis, fold_ups)


def estimate_mix(spec: FunctionalSpec, dataset: Dataset, basis: Basis,
                 link_b: LinkFunction, config: FitConfig,
                 plan: FoldPlan | None = None) -> CrossfitEstimate:
    """Three-fold estimator with identity a-link and non-linear b-link.

    For each estimation fold, b is fitted once on the combined complement
    with unit weight; a is fitted on each nuisance fold with the b-link
    derivative weight from the other nuisance fold, then averaged.
    """
    if link_b.name == "identity":
        raise ValueError("estimate_mix requires a non-identity b-link")
    identity = link("identity")
    if plan is None:
        plan = split_folds(dataset.n, 3, config.seed)
    log = _FitLog(config)
    folds = [dataset.subset(plan.fold(k)) for k in range(3)]

    theta_b_comp, theta_b_fold = {}, {}
    for k in range(3):
        comp = dataset.subset(plan.complement(k))
        theta_b_comp[k] = log.run(f"b_comp{k}", build_loss(spec, comp, basis, "b", link_b)).theta
        theta_b_fold[k] = log.run(f"b_fold{k}", build_loss(spec, folds[k], basis, "b", link_b)).theta
    theta_a = {}  # (k, j) -> a fitted on fold k with weights from fold j
    for k in range(3):
        for j in _others(k):
            wfn = _deriv_weight(basis, link_b, theta_b_fold[j], log)
            prob = build_loss(spec, folds[k], basis, "a", identity, wfn)
            theta_a[(k, j)] = log.run(f"a_fold{k}_w{j}", prob).theta

    fold_chis, fold_ups = [], []
    for k in range(3):
        j1, j2 = _others(k)
        theta_a_bar = 0.5 * (theta_a[(j1, j2)] + theta_a[(j2, j1)])
        ups = _upsilon_from_eval(
            spec, folds[k],
            _nuisance_fn(basis, identity, theta_a_bar),
            _nuisance_fn(basis, link_b, theta_b_comp[k]),
        )
        fold_ups.append(ups)
        fold_chis.append(float(ups.mean()))
    return _finish("mix", spec, dataset, config, plan, log, fold_chis, fold_ups)


def estimate_auto(spec: FunctionalSpec, dataset: Dataset, basis: Basis,
                  link_a: LinkFunction, link_b: LinkFunction,
                  config: FitConfig, plan: FoldPlan | None = None) -> CrossfitEstimate:
    """Dispatch on link linearity: lin, nonlin, or mix."""
    a_id = link_a.name == "identity"
    b_id = link_b.name == "identity"
    if a_id and b_id:
        return estimate_lin(spec, dataset, basis, config, plan)
    if not a_id and not b_id:
        return estimate_nonlin(spec, dataset, basis, link_a, link_b, config, plan)
    if a_id:
        return estimate_mix(spec, dataset, basis, link_b, config, plan)
    raise ValueError("mixed estimation expects the a-link to be the identity")


def estimate_ate(dataset: Dataset, basis: Basis, config: FitConfig,
                 link_a: LinkFunction | None = None,
                 link_b: LinkFunction | None = None) -> dict:
    """Average treatment effect as a difference of two cross-fitted arms.

    Both arms run on the same folds (the split depends only on n, k, seed);
    the variance uses the per-observation difference of the two kernels.
    """
    from .model import registry_get

    identity = link("identity")
    link_a = link_a or identity
    link_b = link_b or identity
    spec = registry_get("ate_arm")
    flipped = Dataset(
        {**dataset.fields, "d": 1.0 - dataset.col("d")}, dataset.z
    )
    arm1 = estimate_auto(spec, dataset, basis, link_a, link_b, config)
    arm2 = estimate_auto(spec, flipped, basis, link_a, link_b, config, plan=arm1.fold_plan)
    chi = arm1.chi_hat - arm2.chi_hat
    diffs = [u1 - u2 for u1, u2 in zip(arm1.upsilon_per_fold, arm2.upsilon_per_fold)]
    fold_chis = arm1.per_fold_chi - arm2.per_fold_chi
    v_hat = float(np.mean([np.mean((d - c) ** 2) for d, c in zip(diffs, fold_chis)]))
    return {
        "ate": chi,
        "v_hat": v_hat,
        "n": dataset.n,
        "ci": wald_ci(chi, v_hat, dataset.n, 0.95),
        "arm1": arm1,
        "arm2": arm2,
    }
