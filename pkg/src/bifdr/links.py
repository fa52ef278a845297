"""Link functions with derivatives and antiderivatives.

Each link phi comes with its derivative phi' and an antiderivative psi
(psi' = phi).  The antiderivative is what enters the nuisance loss, so the
integration constants are fixed once and for all to make objective values
reproducible; they have no statistical meaning.

Exponential evaluations clamp their argument to [-CLAMP_ARG, CLAMP_ARG]
before exponentiation.  This is a numerical guard against IEEE overflow,
not a modelling choice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

CLAMP_ARG = 700.0

_Array = np.ndarray
_Fn = Callable[[_Array], _Array]


@dataclass(frozen=True)
class LinkFunction:
    """A link phi with derivative and antiderivative.

    ``compatible_sign`` is the a.s. sign ("nonnegative" or "nonpositive")
    that a multiplier S must have for S * antideriv(u) to be convex in u.
    ``monotone`` records the strict monotonicity direction of ``value``.
    """

    name: str
    value: _Fn
    deriv: _Fn
    antideriv: _Fn
    compatible_sign: str
    monotone: str


def clamp(u: _Array) -> _Array:
    return np.clip(u, -CLAMP_ARG, CLAMP_ARG)


def _exp(u):
    return np.exp(clamp(u))


def _expit(u):
    # scipy.special.expit is stable, but keeping the clamp consistent with
    # the other exponential-family evaluations costs nothing.
    return 1.0 / (1.0 + _exp(-np.asarray(u, dtype=float)))


def _log1pexp(u):
    u = np.asarray(u, dtype=float)
    return np.where(u > 0, u + np.log1p(_exp(-u)), np.log1p(_exp(u)))


_REGISTRY = {
    # identity: psi(u) = u^2 / 2, psi(0) = 0
    "identity": LinkFunction(
        name="identity",
        value=lambda u: np.asarray(u, dtype=float),
        deriv=lambda u: np.ones_like(np.asarray(u, dtype=float)),
        antideriv=lambda u: np.asarray(u, dtype=float) ** 2 / 2.0,
        compatible_sign="nonnegative",
        monotone="increasing",
    ),
    # exp: psi = exp, psi(0) = 1
    "exp": LinkFunction(
        name="exp",
        value=_exp,
        deriv=_exp,
        antideriv=_exp,
        compatible_sign="nonnegative",
        monotone="increasing",
    ),
    # -exp(-u): psi(u) = exp(-u), psi(0) = 1
    "negexp": LinkFunction(
        name="negexp",
        value=lambda u: -_exp(-np.asarray(u, dtype=float)),
        deriv=lambda u: _exp(-np.asarray(u, dtype=float)),
        antideriv=lambda u: _exp(-np.asarray(u, dtype=float)),
        compatible_sign="nonnegative",
        monotone="increasing",
    ),
    # expit: psi(u) = log(1 + e^u), psi(0) = log 2
    "expit": LinkFunction(
        name="expit",
        value=_expit,
        deriv=lambda u: _expit(u) * (1.0 - _expit(u)),
        antideriv=_log1pexp,
        compatible_sign="nonnegative",
        monotone="increasing",
    ),
    # 1 + exp(-u): psi(u) = u - exp(-u), psi(0) = -1.  Concave psi, so the
    # compatible multiplier sign is nonpositive (e.g. S_ab = -D in the
    # missing-at-random propensity loss).
    "inv-expit": LinkFunction(
        name="inv-expit",
        value=lambda u: 1.0 + _exp(-np.asarray(u, dtype=float)),
        deriv=lambda u: -_exp(-np.asarray(u, dtype=float)),
        antideriv=lambda u: np.asarray(u, dtype=float) - _exp(-np.asarray(u, dtype=float)),
        compatible_sign="nonpositive",
        monotone="decreasing",
    ),
    # -(1 + exp(-u)): psi(u) = -u + exp(-u), psi(0) = 1
    "neg-inv-expit": LinkFunction(
        name="neg-inv-expit",
        value=lambda u: -1.0 - _exp(-np.asarray(u, dtype=float)),
        deriv=lambda u: _exp(-np.asarray(u, dtype=float)),
        antideriv=lambda u: -np.asarray(u, dtype=float) + _exp(-np.asarray(u, dtype=float)),
        compatible_sign="nonnegative",
        monotone="increasing",
    ),
}

LINK_NAMES = tuple(_REGISTRY)


def link(name: str) -> LinkFunction:
    """Return a shipped link by name.

    Shipped names: identity, exp, negexp, expit, inv-expit, neg-inv-expit.
    """
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown link {name!r}; shipped links are {', '.join(LINK_NAMES)}"
        ) from None


def convexity_certificate(lk: LinkFunction, s_sign: str, grid: _Array | None = None,
                          tol: float = 1e-8) -> bool:
    """Check that S * psi is convex on a grid when sign(S) == s_sign.

    Uses second central differences of s * antideriv; returns True when
    every second difference is >= -tol.
    """
    if grid is None:
        grid = np.linspace(-20.0, 20.0, 201)
    s = 1.0 if s_sign == "nonnegative" else -1.0
    vals = s * lk.antideriv(grid)
    second = vals[2:] - 2.0 * vals[1:-1] + vals[:-2]
    return bool(np.all(second >= -tol))
