"""l1-penalized minimization of nuisance objectives.

Proximal gradient with backtracking line search on min L(theta) + lam*|theta|_1.
Convergence is certified by the KKT residual, not by objective change: the
cross-fitting layer relies on the stationarity conditions (the covariate
balancing property is exactly the KKT system of the propensity-type loss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .loss import LossProblem

__all__ = [
    "LambdaFixed",
    "LambdaRate",
    "LambdaCV",
    "FitConfig",
    "PenalizedFit",
    "SolverError",
    "soft_threshold",
    "default_lambda",
    "kkt_residual",
    "fit_l1",
    "cv_lambda",
]

_Array = np.ndarray


class SolverError(RuntimeError):
    """Penalized fit failed to reach the KKT tolerance."""


@dataclass(frozen=True)
class LambdaFixed:
    value: float


@dataclass(frozen=True)
class LambdaRate:
    """lam = c * sqrt(log(p) / n_train); the theory's rate with constant c."""

    c: float = 1.0


@dataclass(frozen=True)
class LambdaCV:
    """K-fold cross-validation over a geometric grid below lam_max."""

    k_folds: int = 10
    n_lambdas: int = 100
    lambda_min_ratio: float = 1e-3

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")


@dataclass(frozen=True)
class FitConfig:
    lam: LambdaFixed | LambdaRate | LambdaCV = field(default_factory=LambdaRate)
    tol_kkt: float = 1e-7
    max_iter: int = 10000
    backtrack_beta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.tol_kkt <= 0:
            raise ValueError("tol_kkt must be positive")
        if not 0.0 < self.backtrack_beta < 1.0:
            raise ValueError("backtrack_beta must lie in (0, 1)")


@dataclass
class PenalizedFit:
    theta: _Array
    lambda_used: float
    iters: int
    kkt_residual: float
    objective: float
    converged: bool


def soft_threshold(x, t):
    """Proximal operator of t * |.|_1: sign(x) * max(|x| - t, 0)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def default_lambda(n, p, c: float = 1.0) -> float:
    """The rate-form default c * sqrt(log(p) / n)."""
    if c <= 0:
        raise ValueError("c must be positive")
    return c * math.sqrt(math.log(p) / n)


def kkt_residual(problem: LossProblem, theta: _Array, lam: float) -> float:
    """l-inf violation of the penalized stationarity conditions."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return _kkt_from_grad(problem.grad(theta), theta, lam, problem.penalized)


def _kkt_from_grad(g: _Array, theta: _Array, lam: float, penalized: _Array) -> float:
    lam_vec = np.where(penalized, lam, 0.0)
    active = theta != 0
    res = np.where(
        active,
        np.abs(g + lam_vec * np.sign(theta)),
        np.maximum(np.abs(g) - lam_vec, 0.0),
    )
    return float(res.max()) if res.size else 0.0


def _lipschitz_estimate(problem: LossProblem, seed: int = 0, iters: int = 30) -> float:
    """Power-iteration estimate of the quadratic-case Lipschitz constant.

    The estimate depends on the problem only, so it is memoized on the
    problem; backtracking corrects any slack in it.
    """
    cached = problem.__dict__.get("_lip")
    if cached is not None:
        return cached
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(problem.p)
    v /= np.linalg.norm(v)
    scale = float(np.abs(problem.link.deriv(np.zeros(1)))[0])
    d = np.abs(problem.s_ab * problem.w) * max(scale, 1e-12)
    lam_max = 1.0
    for _ in range(iters):
        av = problem.x.T @ (d * (problem.x @ v)) / problem.n
        lam_max = float(np.linalg.norm(av))
        if lam_max <= 1e-300:
            return 1.0
        v = av / lam_max
    lam_max = max(lam_max, 1e-12)
    object.__setattr__(problem, "_lip", lam_max)
    return lam_max


def _prox_step(problem: LossProblem, base: _Array, g: _Array, f_base: float,
               step: float, lam_vec: _Array, beta: float):
    """One backtracked proximal step from ``base``; returns (cand, f_cand, step)."""
    slack = 1e-14 * max(1.0, abs(f_base))
    while True:
        cand = soft_threshold(base - step * g, step * lam_vec)
        delta = cand - base
        f_cand = problem.value(cand)
        if f_cand <= f_base + g @ delta + (delta @ delta) / (2.0 * step) + slack:
            return cand, float(f_cand), step
        step *= beta
        if step < 1e-18:
            raise SolverError("backtracking step collapsed; objective may be non-convex")


def resolve_lambda(problem: LossProblem, config: FitConfig) -> float:
    lam = config.lam
    if isinstance(lam, LambdaFixed):
        return lam.value
    if isinstance(lam, LambdaRate):
        return default_lambda(problem.n, problem.p, lam.c)
    return cv_lambda(problem, config)


def fit_l1(problem: LossProblem, config: FitConfig, lam: float | None = None,
           theta0: _Array | None = None, check_convergence: bool = True) -> PenalizedFit:
    """Minimize L(theta) + lam * |theta|_1 by backtracked proximal gradient.

    Returns the iterate once the KKT residual falls below tol_kkt; if
    max_iter is exhausted the best iterate is returned flagged non-converged
    (and ``check_convergence`` keeps it from being an error only when False).
    """
    if lam is None:
        lam = resolve_lambda(problem, config)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    theta = np.zeros(problem.p) if theta0 is None else np.array(theta0, dtype=float)
    lam_vec = np.where(problem.penalized, lam, 0.0)

    step = 1.0 / _lipschitz_estimate(problem, seed=config.seed)
    beta = config.backtrack_beta
    fval = problem.value(theta)
    obj = fval + float(lam_vec @ np.abs(theta))
    theta_prev = theta
    t_k = 1.0
    res = math.inf
    iters = 0
    for iters in range(1, config.max_iter + 1):
        g = problem.grad(theta)
        res = _kkt_from_grad(g, theta, lam, problem.penalized)
        if res <= config.tol_kkt:
            iters -= 1
            break
        # Nesterov extrapolation; the plain-step fallback below keeps the
        # penalized objective monotone.
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k))
        momentum = (t_k - 1.0) / t_next
        if momentum > 0.0 and theta_prev is not theta:
            y = theta + momentum * (theta - theta_prev)
            g_y, f_y = problem.grad(y), problem.value(y)
        else:
            y, g_y, f_y = theta, g, fval
        # backtracking only ever shrinks the step below the Lipschitz
        # estimate; growing it destabilizes the prox iteration near the
        # solution where objective differences are at rounding level
        cand, f_cand, step = _prox_step(problem, y, g_y, f_y, step, lam_vec, beta)
        new_obj = f_cand + float(lam_vec @ np.abs(cand))
        if new_obj > obj and y is not theta:
            # momentum overshot (FISTA is not monotone); restart from the
            # current iterate with a plain descent step
            t_next = 1.0
            cand, f_cand, step = _prox_step(problem, theta, g, fval, step, lam_vec, beta)
            new_obj = f_cand + float(lam_vec @ np.abs(cand))
        if new_obj > obj + 1e-9 * max(1.0, abs(obj)):
            raise SolverError("penalized objective increased on an accepted step")
        theta_prev, theta, fval, obj, t_k = theta, cand, f_cand, new_obj, t_next
    else:
        g = problem.grad(theta)
        res = _kkt_from_grad(g, theta, lam, problem.penalized)

    converged = res <= config.tol_kkt
    fit = PenalizedFit(
        theta=theta, lambda_used=float(lam), iters=iters,
        kkt_residual=float(res), objective=float(obj), converged=converged,
    )
    if check_convergence and not converged:
        raise SolverError(
            f"fit_l1 did not reach tol_kkt={config.tol_kkt:g} in "
            f"{config.max_iter} iterations (residual {res:.3e})"
        )
    return fit


def assign_folds(n: int, k: int, seed) -> _Array:
    """Seeded uniform shuffle, contiguous blocks, remainder round-robin."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base, rem = divmod(n, k)
    assignment = np.empty(n, dtype=int)
    for i in range(k):
        assignment[perm[i * base:(i + 1) * base]] = i
    for r in range(rem):
        assignment[perm[k * base + r]] = r
    return assignment


def lambda_grid(lam_max: float, n_lambdas: int, min_ratio: float) -> _Array:
    if n_lambdas == 1:
        return np.array([lam_max * min_ratio])
    return np.geomspace(lam_max, lam_max * min_ratio, n_lambdas)


def cv_lambda(problem: LossProblem, config: FitConfig) -> float:
    """K-fold CV over a geometric lambda grid.

    The CV criterion is the pooled out-of-fold mean of the unpenalized loss;
    ties break toward the larger lambda.  Path fits are warm-started and run
    at a relaxed tolerance; only the final refit at the selected lambda must
    certify the full KKT tolerance.
    """
    if not isinstance(config.lam, LambdaCV):
        raise ValueError("cv_lambda requires a LambdaCV configuration")
    cv = config.lam
    if cv.k_folds > problem.n:
        raise ValueError("more CV folds than rows")
    lam_max = float(np.max(np.abs(problem.grad(np.zeros(problem.p)))))
    if lam_max <= 0:
        lam_max = 1.0
    grid = lambda_grid(lam_max, cv.n_lambdas, cv.lambda_min_ratio)

    assignment = assign_folds(problem.n, cv.k_folds, config.seed)
    if len(np.unique(assignment)) < 2:
        raise ValueError("fewer than 2 usable folds")
    scores = np.zeros(len(grid))
    path_cfg = FitConfig(
        lam=config.lam, tol_kkt=max(config.tol_kkt, 1e-4),
        max_iter=min(config.max_iter, 2000), backtrack_beta=config.backtrack_beta,
        seed=config.seed,
    )
    for fold in range(cv.k_folds):
        val_idx = np.flatnonzero(assignment == fold)
        train = problem.subset(np.flatnonzero(assignment != fold))
        val = problem.subset(val_idx)
        theta = np.zeros(problem.p)
        for gi, lam in enumerate(grid):
            fit = fit_l1(train, path_cfg, lam=lam, theta0=theta, check_convergence=False)
            theta = fit.theta
            scores[gi] += val.value(theta) * len(val_idx)
    scores /= problem.n
    best = int(np.argmin(scores))  # argmin takes the first (largest-lambda) tie
    return float(grid[best])
