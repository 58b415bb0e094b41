"""Latent class choice model with logit class membership, estimated by EM.

Class membership is a multinomial logit on person features with an
intercept; the last class is the base with all-zero coefficients. Both
M-steps are exact maximizations, so the marginal log likelihood never
decreases across EM iterations.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import log_softmax, logsumexp

from .design import UtilityDesign
from .errors import EmptyClassError, ShapeError
from .mnl import ChoiceParams, maximize_weighted, person_log_likelihoods

SEPARATION_THRESHOLD = 10.0


@dataclass(frozen=True)
class MembershipParams:
    """Class-membership coefficients, shape ``(K-1, D+1)``, intercept first."""

    gamma: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if not np.all(np.isfinite(g)):
            raise ValueError("membership coefficients must be finite")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @classmethod
    def zeros(cls, n_classes: int, n_features: int, feature_names: Sequence[str] = ()) -> "MembershipParams":
        return cls(np.zeros((n_classes - 1, n_features + 1)), feature_names)

    @property
    def n_classes(self) -> int:
        return self.gamma.shape[0] + 1

    @property
    def full(self) -> np.ndarray:
        """Coefficients with the zero base-class row appended."""
        return np.vstack([self.gamma, np.zeros((1, self.gamma.shape[1]))])

    @property
    def names(self) -> tuple[str, ...]:
        feats = self.feature_names or tuple(f"s{i}" for i in range(self.gamma.shape[1] - 1))
        return ("intercept",) + tuple(feats)


def _with_intercept(S) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return np.column_stack([np.ones(S.shape[0]), S])


def log_membership_probabilities(S, gamma: MembershipParams) -> np.ndarray:
    """Log class probabilities, shape ``(N, K)``; ``S`` excludes the intercept."""
    Z = _with_intercept(S)
    if Z.shape[1] != gamma.gamma.shape[1]:
        raise ShapeError(f"features have {Z.shape[1] - 1} columns, membership model expects {gamma.gamma.shape[1] - 1}")
    return log_softmax(Z @ gamma.full.T, axis=1)


def membership_probabilities(S, gamma: MembershipParams) -> np.ndarray:
    """Softmax class probabilities. A single feature row gives a K-vector."""
    single = np.asarray(S).ndim == 1
    P = np.exp(log_membership_probabilities(S, gamma))
    return P[0] if single else P


def posterior(log_prior: np.ndarray, loglik: np.ndarray) -> np.ndarray:
    """Row-normalized ``prior * exp(loglik)`` computed in the log domain."""
    a = np.asarray(log_prior, dtype=float) + np.asarray(loglik, dtype=float)
    return np.exp(a - logsumexp(a, axis=1, keepdims=True))


def mixture_log_likelihood(log_prior: np.ndarray, loglik: np.ndarray) -> np.ndarray:
    """Per-person ``log sum_k prior_k exp(loglik_k)``."""
    return logsumexp(np.asarray(log_prior, dtype=float) + np.asarray(loglik, dtype=float), axis=1)


def class_logliks(design: UtilityDesign, betas: Sequence[ChoiceParams]) -> np.ndarray:
    """Panel log likelihood of every person under each class, shape ``(N, K)``."""
    return np.column_stack([person_log_likelihoods(design, b) for b in betas])


def lccm_e_step(design: UtilityDesign, S, gamma: MembershipParams, betas: Sequence[ChoiceParams]) -> np.ndarray:
    return posterior(log_membership_probabilities(S, gamma), class_logliks(design, betas))


def membership_objective(S, resp, gamma: MembershipParams) -> float:
    return float(np.sum(resp * log_membership_probabilities(S, gamma)))


def maximize_membership(S, resp, init: MembershipParams, gtol: float = 1e-6, max_iter: int = 500) -> MembershipParams:
    """Weighted multinomial logit of responsibilities on features.

    Warns when a coefficient grows past a separation threshold, which
    signals that the responsibilities are (nearly) perfectly predicted.
    """
    Z = _with_intercept(S)
    R = np.asarray(resp, dtype=float)
    K = init.n_classes
    if R.shape != (Z.shape[0], K):
        raise ShapeError(f"responsibilities have shape {R.shape}, expected {(Z.shape[0], K)}")
    if K == 1:
        return init
    shape = init.gamma.shape
    scale = max(float(Z.shape[0]), 1.0)

    def fun(theta):
        G = np.vstack([theta.reshape(shape), np.zeros((1, shape[1]))])
        lp = log_softmax(Z @ G.T, axis=1)
        value = np.sum(R * lp)
        # d/dG_k = sum_n (r_nk - sum_j r_nj * p_nk) z_n
        grad = (R - R.sum(axis=1, keepdims=True) * np.exp(lp)).T @ Z
        return -value / scale, -grad[:-1].ravel() / scale

    x0 = init.gamma.ravel()
    f0, _ = fun(x0)
    res = optimize.minimize(fun, x0, jac=True, method="BFGS", options={"gtol": gtol / scale, "maxiter": max_iter})
    if res.fun > f0:
        return init
    gamma = res.x.reshape(shape)
    if np.max(np.abs(gamma)) > SEPARATION_THRESHOLD:
        warnings.warn(
            "class membership coefficients exceed "
            f"{SEPARATION_THRESHOLD:g} in magnitude; responsibilities may be separated by the features",
            stacklevel=2,
        )
    return MembershipParams(gamma, init.feature_names)


@dataclass(frozen=True)
class FittedLccm:
    n_classes: int
    membership: MembershipParams
    betas: tuple[ChoiceParams, ...]
    responsibilities: np.ndarray
    trace: tuple[float, ...]
    converged: bool
    restart_diagnostics: tuple = field(default_factory=tuple)

    @property
    def marginal_loglik(self) -> float:
        return self.trace[-1]

    @property
    def n_iterations(self) -> int:
        return len(self.trace) - 1

    def class_probabilities(self, S) -> np.ndarray:
        return membership_probabilities(np.atleast_2d(S), self.membership)

    def person_loglik(self, design: UtilityDesign, S) -> np.ndarray:
        return mixture_log_likelihood(log_membership_probabilities(S, self.membership), class_logliks(design, self.betas))

    def permute(self, order: Sequence[int]) -> "FittedLccm":
        """Reorder classes; the membership model is re-expressed against the new base."""
        order = list(order)
        G = self.membership.full[order]
        G = G - G[-1]
        return FittedLccm(
            self.n_classes,
            MembershipParams(G[:-1], self.membership.feature_names),
            tuple(self.betas[k] for k in order),
            self.responsibilities[:, order],
            self.trace,
            self.converged,
            self.restart_diagnostics,
        )


def _marginal(design, S, gamma, betas) -> float:
    return float(np.sum(mixture_log_likelihood(log_membership_probabilities(S, gamma), class_logliks(design, betas))))


def _check_mass(resp: np.ndarray) -> None:
    mass = resp.sum(axis=0)
    n = resp.shape[0]
    for k, m in enumerate(mass):
        if m < 1e-6 * n:
            raise EmptyClassError(
                f"class {k} has responsibility mass {m:.3g}; try a smaller number of classes"
            )


def _em_once(design, S, K, template, rng, tol, max_iter, feature_names):
    N = design.n_persons
    labels = rng.integers(0, K, size=N)
    resp = np.eye(K)[labels]
    gamma = maximize_membership(S, resp, MembershipParams.zeros(K, S.shape[1], feature_names))
    betas = tuple(maximize_weighted(design, resp[:, k], template) for k in range(K))
    trace = [_marginal(design, S, gamma, betas)]
    converged = False
    for _ in range(max_iter):
        resp = lccm_e_step(design, S, gamma, betas)
        _check_mass(resp)
        gamma = maximize_membership(S, resp, gamma)
        betas = tuple(maximize_weighted(design, resp[:, k], betas[k]) for k in range(K))
        trace.append(_marginal(design, S, gamma, betas))
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    resp = lccm_e_step(design, S, gamma, betas)
    return FittedLccm(K, gamma, betas, resp, tuple(trace), converged)


def fit_lccm(
    design: UtilityDesign,
    S,
    n_classes: int,
    template: ChoiceParams | None = None,
    seed: int | np.random.SeedSequence = 0,
    restarts: int = 5,
    tol: float = 1e-4,
    max_iter: int = 500,
    feature_names: Sequence[str] = (),
    threads: int = 1,
) -> FittedLccm:
    """Fit by EM from ``restarts`` random hard assignments; keep the best.

    Parameters
    ----------
    S : ndarray, shape (N, D)
        Person features without an intercept column.
    template : ChoiceParams, optional
        Starting coefficients, fixed entries and bounds shared by every class.
    """
    K = int(n_classes)
    if K < 1:
        raise ValueError("number of classes must be at least 1")
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != design.n_persons:
        raise ShapeError(f"{S.shape[0]} feature rows for {design.n_persons} persons")
    template = template if template is not None else ChoiceParams.create(design.names)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(max(restarts, 1))

    def run(child):
        return _em_once(design, S, K, template, np.random.default_rng(child), tol, max_iter, feature_names)

    if threads > 1 and len(children) > 1:
        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(run, children))
    else:
        fits = [run(c) for c in children]
    best = max(fits, key=lambda f: f.marginal_loglik)
    if not best.converged:
        warnings.warn(f"EM stopped at the iteration cap {max_iter} without converging", stacklevel=2)
    diag = tuple(
        {"restart": i, "marginal_loglik": f.marginal_loglik, "iterations": f.n_iterations, "converged": f.converged}
        for i, f in enumerate(fits)
    )
    return FittedLccm(best.n_classes, best.membership, best.betas, best.responsibilities, best.trace, best.converged, diag)
