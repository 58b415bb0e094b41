"""Multinomial logit with panel likelihood and person-level weights.

All probabilities are computed in the log domain with max subtraction.
The weighted objective is

    sum_n w_n sum_t log P(chosen_nt | beta)

which is concave in ``beta``; the latent class estimators call
:func:`maximize_weighted` once per class with responsibilities as weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from .design import UtilityDesign
from .errors import AvailabilityError, OptimizationError, ShapeError, WeightError

_BOUND_TOL = 1e-10


@dataclass(frozen=True)
class ChoiceParams:
    """Coefficients of one class's utility function.

    Attributes
    ----------
    names : tuple of str
    beta : ndarray
    fixed : ndarray of bool
        Entries held at exactly zero and excluded from estimation.
    lower, upper : ndarray
        Box bounds; ``-inf``/``inf`` when unbounded.
    """

    names: tuple[str, ...]
    beta: np.ndarray
    fixed: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        p = len(self.names)
        beta = np.array(self.beta, dtype=float).reshape(-1)
        fixed = np.array(self.fixed, dtype=bool).reshape(-1)
        lower = np.array(self.lower, dtype=float).reshape(-1)
        upper = np.array(self.upper, dtype=float).reshape(-1)
        if not (len(beta) == len(fixed) == len(lower) == len(upper) == p):
            raise ShapeError("ChoiceParams fields must all have one entry per name")
        if np.any(lower > upper):
            raise ValueError("lower bound above upper bound")
        beta[fixed] = 0.0
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def create(
        cls,
        names: Sequence[str],
        beta: Sequence[float] | None = None,
        fixed: Sequence[str] = (),
        bounds: Mapping[str, tuple[float | None, float | None]] | None = None,
    ) -> "ChoiceParams":
        """Build from names, with fixed entries and bounds given by name."""
        names = tuple(names)
        p = len(names)
        index = {n: i for i, n in enumerate(names)}
        fx = np.zeros(p, dtype=bool)
        for n in fixed:
            if n not in index:
                raise KeyError(f"unknown parameter {n!r}")
            fx[index[n]] = True
        lo = np.full(p, -np.inf)
        hi = np.full(p, np.inf)
        for n, (a, b) in (bounds or {}).items():
            if n not in index:
                raise KeyError(f"unknown parameter {n!r}")
            lo[index[n]] = -np.inf if a is None else float(a)
            hi[index[n]] = np.inf if b is None else float(b)
        b0 = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
        return cls(names, np.clip(b0, lo, hi), fx, lo, hi)

    @property
    def free(self) -> np.ndarray:
        return ~self.fixed

    @property
    def n_free(self) -> int:
        return int(np.sum(~self.fixed))

    @property
    def bounded(self) -> bool:
        f = ~self.fixed
        return bool(np.any(np.isfinite(self.lower[f])) or np.any(np.isfinite(self.upper[f])))

    def active_bounds(self) -> np.ndarray:
        return ~self.fixed & (
            (np.abs(self.beta - self.lower) <= _BOUND_TOL) | (np.abs(self.beta - self.upper) <= _BOUND_TOL)
        )

    def with_beta(self, beta: np.ndarray) -> "ChoiceParams":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def with_free(self, theta: np.ndarray) -> "ChoiceParams":
        beta = self.beta.copy()
        beta[~self.fixed] = theta
        return replace(self, beta=beta)

    def __getitem__(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])


def log_choice_probabilities(X: np.ndarray, available: np.ndarray, beta) -> np.ndarray:
    """Log softmax of ``X @ beta`` over available alternatives.

    Works on one scenario ``(J, P)`` or a stack ``(n, J, P)``.
    Unavailable alternatives get ``-inf``.
    """
    b = beta.beta if isinstance(beta, ChoiceParams) else np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    avail = np.asarray(available, dtype=bool)
    if X.shape[-1] != b.shape[0]:
        raise ShapeError(f"design has {X.shape[-1]} columns, beta has {b.shape[0]}")
    if X.shape[:-1] != avail.shape:
        raise ShapeError("availability mask does not match the design")
    if not np.all(np.any(avail, axis=-1)):
        raise AvailabilityError("scenario with no available alternative")
    V = np.where(avail, X @ b, -np.inf)
    return V - logsumexp(V, axis=-1, keepdims=True)


def choice_probabilities(X: np.ndarray, available: np.ndarray, beta) -> np.ndarray:
    """Logit probabilities; zero for unavailable alternatives."""
    return np.exp(log_choice_probabilities(X, available, beta))


def chosen_log_probabilities(design: UtilityDesign, beta) -> np.ndarray:
    """Log probability of the chosen alternative, one entry per scenario."""
    lp = log_choice_probabilities(design.X, design.available, beta)
    return lp[np.arange(design.n_obs), design.chosen]


def person_log_likelihoods(design: UtilityDesign, beta) -> np.ndarray:
    """Panel log likelihood of every person: sum over that person's scenarios."""
    return np.bincount(design.person, weights=chosen_log_probabilities(design, beta), minlength=design.n_persons)


def panel_log_likelihood(design: UtilityDesign, beta, person: int) -> float:
    rows = design.person == person
    if not np.any(rows):
        raise ValueError(f"person {person} has no scenarios")
    lp = log_choice_probabilities(design.X[rows], design.available[rows], beta)
    return float(np.sum(lp[np.arange(lp.shape[0]), design.chosen[rows]]))


def _check_weights(design: UtilityDesign, weights) -> np.ndarray:
    if weights is None:
        return np.ones(design.n_persons)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != design.n_persons:
        raise WeightError(f"expected {design.n_persons} weights, got {w.shape[0]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise WeightError("weights must be finite and nonnegative")
    return w


def _value_and_full_gradient(design: UtilityDesign, b: np.ndarray, w_obs: np.ndarray):
    lp = log_choice_probabilities(design.X, design.available, b)
    rows = np.arange(design.n_obs)
    value = float(np.dot(w_obs, lp[rows, design.chosen]))
    P = np.exp(lp)
    # sum_j (y_j - P_j) x_j per scenario
    resid = design.X[rows, design.chosen] - np.einsum("nj,njp->np", P, design.X)
    return value, w_obs @ resid


def weighted_loglik_and_gradient(design: UtilityDesign, params: ChoiceParams, weights) -> tuple[float, np.ndarray]:
    """Weighted panel log likelihood and its gradient over free entries."""
    w = _check_weights(design, weights)
    value, grad = _value_and_full_gradient(design, params.beta, w[design.person])
    return value, grad[~params.fixed]


def maximize_weighted(
    design: UtilityDesign,
    weights,
    init: ChoiceParams,
    gtol: float = 1e-6,
    ftol: float = 1e-10,
    max_iter: int = 2000,
) -> ChoiceParams:
    """Maximize the weighted log likelihood over the free coefficients.

    BFGS is used when no bounds are present, L-BFGS-B otherwise. The
    result is never worse than ``init``.

    Raises
    ------
    OptimizationError
        If the objective becomes non-finite; the offending beta is attached.
    """
    w_obs = _check_weights(design, weights)[design.person]
    free = ~init.fixed
    if not np.any(free):
        return init
    base = init.beta.copy()
    # scale so tolerances behave the same for any sample size
    scale = max(float(np.sum(w_obs)), 1.0)

    def fun(theta):
        b = base.copy()
        b[free] = theta
        v, g = _value_and_full_gradient(design, b, w_obs)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            raise OptimizationError("non-finite objective", diagnostics={"beta": b.tolist()})
        return -v / scale, -g[free] / scale

    theta0 = init.beta[free]
    f0, _ = fun(theta0)
    if init.bounded:
        bounds = list(zip(init.lower[free], init.upper[free]))
        bounds = [(None if np.isinf(a) else a, None if np.isinf(b) else b) for a, b in bounds]
        res = optimize.minimize(
            fun,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"gtol": gtol / scale, "ftol": ftol, "maxiter": max_iter},
        )
        theta = np.clip(res.x, init.lower[free], init.upper[free])
    else:
        res = optimize.minimize(
            fun, theta0, jac=True, method="BFGS", options={"gtol": gtol / scale, "maxiter": max_iter}
        )
        theta = res.x
    f1, _ = fun(theta)
    if f1 > f0:
        return init
    return init.with_free(theta)


def fit_mnl(design: UtilityDesign, init: ChoiceParams | None = None, weights=None) -> ChoiceParams:
    if init is None:
        init = ChoiceParams.create(design.names)
    return maximize_weighted(design, weights, init)


def numerical_hessian(design: UtilityDesign, params: ChoiceParams, weights, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the analytic gradient over free entries."""
    w = _check_weights(design, weights)
    free = np.flatnonzero(~params.fixed)
    H = np.zeros((len(free), len(free)))
    for i, k in enumerate(free):
        h = step * max(1.0, abs(params.beta[k]))
        bp = params.beta.copy()
        bm = params.beta.copy()
        bp[k] += h
        bm[k] -= h
        _, gp = weighted_loglik_and_gradient(design, params.with_beta(bp), w)
        _, gm = weighted_loglik_and_gradient(design, params.with_beta(bm), w)
        H[:, i] = (gp - gm) / (2 * h)
    return 0.5 * (H + H.T)


def standard_errors(design: UtilityDesign, params: ChoiceParams, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Standard errors and two-sided normal p-values.

    Fixed entries and entries sitting on a bound get NaN. A singular
    information matrix yields NaN for every entry instead of an error.
    """
    p = len(params.names)
    se = np.full(p, np.nan)
    pv = np.full(p, np.nan)
    H = numerical_hessian(design, params, weights)
    free = np.flatnonzero(~params.fixed)
    keep = ~params.active_bounds()[free]
    info = -H[np.ix_(keep, keep)]
    idx = free[keep]
    if len(idx) == 0:
        return se, pv
    try:
        L = np.linalg.cholesky(info)
        cov = np.linalg.inv(L).T @ np.linalg.inv(L)
    except np.linalg.LinAlgError:
        warnings.warn("information matrix is not positive definite; standard errors unavailable", stacklevel=2)
        return se, pv
    se[idx] = np.sqrt(np.diag(cov))
    pv[idx] = p_values(params.beta[idx] / se[idx])
    return se, pv


def p_values(z: np.ndarray) -> np.ndarray:
    return 2.0 * stats.norm.sf(np.abs(z))
