"""Latent class choice model with Gaussian-process class membership.

Class membership comes from one-versus-rest Laplace GP classifiers on
person features; each class has its own multinomial logit. Estimation is
EM:

1. draw random hard class labels and initialise each class's
   coefficients by a weighted MNL fit on those labels;
2. fit the membership GPs (with hyperparameter search) on the labels;
3. E-step: responsibilities from GP class probabilities and panel choice
   likelihoods;
4. M-step: per-class weighted MNL, then hard labels by argmax, then a GP
   refit on the new labels with hyperparameters warm-started;
5. stop when the marginal log likelihood changes by less than ``tol``;
6. report the marginal log likelihood under the averaged predictive
   class probabilities at the training persons, the same quantity
   :func:`predict` gives for them.

Steps 3 to 5 use plug-in probabilities ``sigmoid(f_hat)``.

The GP refit is skipped when the hard labels did not change, since the
refit is a deterministic function of the labels and warm-started kernel.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .design import UtilityDesign
from .errors import DegenerateClassError, ShapeError
from .gp import OvrClassifier, ovr_fit
from .kernels import Kernel
from .lccm import class_logliks, posterior
from .mnl import ChoiceParams, choice_probabilities, maximize_weighted, weighted_loglik_and_gradient

MAX_RESEEDS = 3


def e_step(gp_probs, choice_logliks) -> np.ndarray:
    """Responsibilities proportional to ``gp_probs * exp(choice_logliks)``."""
    gp_probs = np.asarray(gp_probs, dtype=float)
    with np.errstate(divide="ignore"):
        return posterior(np.log(gp_probs), choice_logliks)


def hard_assign(resp) -> np.ndarray:
    """Row-wise argmax; exact ties go to the lowest class index."""
    return np.argmax(np.asarray(resp), axis=1)


def expected_complete_loglik(resp, gp_log_terms, choice_logliks) -> float:
    resp = np.asarray(resp, dtype=float)
    a = np.asarray(gp_log_terms, dtype=float)
    b = np.asarray(choice_logliks, dtype=float)
    if not resp.shape == a.shape == b.shape:
        raise ShapeError(f"shapes {resp.shape}, {a.shape}, {b.shape} do not match")
    # 0 * log 0 contributes nothing
    live = resp > 0
    terms = np.zeros_like(resp)
    terms[live] = resp[live] * (a[live] + b[live])
    return float(np.sum(terms))


def person_marginal_logliks(gp_probs, choice_logliks) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return logsumexp(np.log(np.asarray(gp_probs, dtype=float)) + np.asarray(choice_logliks, dtype=float), axis=1)


def marginal_log_likelihood(gp_probs, choice_logliks) -> float:
    """Sum over persons of ``log sum_k gp_probs_nk exp(choice_logliks_nk)``."""
    return float(np.sum(person_marginal_logliks(gp_probs, choice_logliks)))


@dataclass(frozen=True)
class GpLccmConfig:
    """Estimation settings.

    Attributes
    ----------
    restarts : int
        Independent EM runs from random labels; the best is kept.
    hyper_restarts : int
        Hyperparameter starts for the first GP fit of each run. Later
        refits are warm-started from the previous kernel only.
    optimize_kernel : bool
        Set False to keep the kernel hyperparameters as given.
    """

    restarts: int = 5
    tol: float = 1e-4
    max_iter: int = 500
    hyper_restarts: int = 3
    optimize_kernel: bool = True
    jitter: float | None = None
    threads: int = 1


@dataclass(frozen=True)
class FittedGpLccm:
    n_classes: int
    ovr: OvrClassifier | None
    betas: tuple[ChoiceParams, ...]
    responsibilities: np.ndarray
    labels: np.ndarray
    marginal_trace: tuple[float, ...]
    joint_trace: tuple[float, ...]
    mstep_objectives: tuple = ()
    converged: bool = True
    n_reseeds: int = 0
    restart_diagnostics: tuple = field(default_factory=tuple)
    final_marginal_loglik: float | None = None

    @property
    def marginal_loglik(self) -> float:
        """Marginal log likelihood with averaged predictive class probabilities.

        This is what :func:`predict` reproduces on the training persons.
        The trace holds the plug-in values that drive convergence.
        """
        if self.final_marginal_loglik is None:
            return self.marginal_trace[-1]
        return self.final_marginal_loglik

    @property
    def joint_loglik(self) -> float:
        return self.joint_trace[-1]

    @property
    def n_iterations(self) -> int:
        return len(self.marginal_trace) - 1

    @property
    def kernels(self) -> tuple[Kernel, ...]:
        return () if self.ovr is None else self.ovr.kernels

    @property
    def features(self) -> np.ndarray | None:
        return None if self.ovr is None else self.ovr.states[0].features

    def training_class_probabilities(self) -> np.ndarray:
        if self.ovr is None:
            return np.ones((self.responsibilities.shape[0], 1))
        return self.ovr.training_probabilities()

    def class_probabilities(self, S) -> np.ndarray:
        """Averaged predictive class probabilities at new feature rows."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if self.ovr is None:
            return np.ones((S.shape[0], 1))
        return self.ovr.predict(S)

    def permute(self, order: Sequence[int]) -> "FittedGpLccm":
        order = list(order)
        inv = np.argsort(order)
        ovr = None if self.ovr is None else OvrClassifier(tuple(self.ovr.states[k] for k in order))
        return replace(
            self,
            ovr=ovr,
            betas=tuple(self.betas[k] for k in order),
            responsibilities=self.responsibilities[:, order],
            labels=inv[self.labels],
        )


def _reseed_empty(labels: np.ndarray, resp: np.ndarray, K: int) -> tuple[np.ndarray, int]:
    labels = labels.copy()
    n = len(labels)
    take = max(2, math.ceil(0.01 * n))
    reseeded = 0
    for k in range(K):
        if np.any(labels == k):
            continue
        # highest responsibility first; stable order keeps it deterministic
        idx = np.argsort(-resp[:, k], kind="stable")[:take]
        labels[idx] = k
        reseeded += 1
        warnings.warn(f"class {k} became empty; reseeded with {take} persons", stacklevel=3)
    # a class may have lost all its members to the reseed
    if any(not np.any(labels == k) for k in range(K)):
        raise DegenerateClassError("cannot keep every class populated; try fewer classes")
    return labels, reseeded


def _initial_labels(rng: np.random.Generator, n: int, K: int) -> np.ndarray:
    if n < 2 * K:
        raise DegenerateClassError(f"{n} persons cannot populate {K} classes")
    labels = rng.integers(0, K, size=n)
    # every class needs members and non-members for its binary classifier
    for k in range(K):
        if not np.any(labels == k):
            labels[rng.choice(np.flatnonzero(np.bincount(labels, minlength=K)[labels] > 1))] = k
    return labels


def _em_once(design, S, K, kernel, template, rng, cfg: GpLccmConfig) -> FittedGpLccm:
    N = design.n_persons
    labels = _initial_labels(rng, N, K)
    onehot = np.eye(K)[labels]
    betas = [maximize_weighted(design, onehot[:, k], template) for k in range(K)]
    ovr = ovr_fit(
        S, labels, kernel, K, optimize=cfg.optimize_kernel, restarts=cfg.hyper_restarts, rng=rng, jitter=cfg.jitter
    )
    marginal, joint, msteps = [], [], []
    reseeds = 0
    converged = False
    while True:
        gp_probs = ovr.training_probabilities()
        ll = class_logliks(design, betas)
        marginal.append(marginal_log_likelihood(gp_probs, ll))
        resp = e_step(gp_probs, ll)
        with np.errstate(divide="ignore"):
            joint.append(expected_complete_loglik(resp, np.log(gp_probs), ll))
        if len(marginal) > 1 and abs(marginal[-1] - marginal[-2]) < cfg.tol:
            converged = True
            break
        if len(marginal) > cfg.max_iter:
            break
        record = []
        for k in range(K):
            before, _ = weighted_loglik_and_gradient(design, betas[k], resp[:, k])
            betas[k] = maximize_weighted(design, resp[:, k], betas[k])
            after, _ = weighted_loglik_and_gradient(design, betas[k], resp[:, k])
            record.append((before, after))
        msteps.append(tuple(record))
        new_labels = hard_assign(resp)
        new_labels, r = _reseed_empty(new_labels, resp, K)
        reseeds += r
        if reseeds > MAX_RESEEDS:
            raise DegenerateClassError(f"classes emptied {reseeds} times; the number of classes looks too large")
        if not np.array_equal(new_labels, labels):
            labels = new_labels
            ovr = ovr_fit(S, labels, list(ovr.kernels), K, optimize=cfg.optimize_kernel, restarts=1, jitter=cfg.jitter)
    final = marginal_log_likelihood(ovr.predict(S), ll)
    return FittedGpLccm(
        K, ovr, tuple(betas), resp, labels, tuple(marginal), tuple(joint), tuple(msteps), converged, reseeds, (), final
    )


def _single_class(design, template) -> FittedGpLccm:
    beta = maximize_weighted(design, None, template)
    ll = class_logliks(design, [beta])
    gp = np.ones_like(ll)
    m = marginal_log_likelihood(gp, ll)
    resp = np.ones_like(ll)
    labels = np.zeros(design.n_persons, dtype=int)
    return FittedGpLccm(1, None, (beta,), resp, labels, (m,), (m,))


def fit_gp_lccm(
    design: UtilityDesign,
    S,
    n_classes: int,
    kernel: Kernel,
    template: ChoiceParams | None = None,
    seed: int | np.random.SeedSequence = 0,
    config: GpLccmConfig | None = None,
) -> FittedGpLccm:
    """Estimate by EM from several random starts and keep the best.

    Parameters
    ----------
    S : ndarray, shape (N, D)
        Standardized person features, rows aligned with ``design`` persons.
    kernel : Kernel
        Starting kernel for every one-versus-rest classifier.
    template : ChoiceParams, optional
        Starting coefficients, fixed entries and bounds for every class.

    Notes
    -----
    With ``n_classes == 1`` no membership model is fit and the result is
    the plain MNL fit.
    """
    cfg = config or GpLccmConfig()
    K = int(n_classes)
    if K < 1:
        raise ValueError("number of classes must be at least 1")
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != design.n_persons:
        raise ShapeError(f"{S.shape[0]} feature rows for {design.n_persons} persons")
    template = template if template is not None else ChoiceParams.create(design.names)
    if K == 1:
        return _single_class(design, template)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(max(cfg.restarts, 1))

    def run(i_child):
        i, child = i_child
        try:
            return _em_once(design, S, K, kernel, template, np.random.default_rng(child), cfg), None
        except DegenerateClassError as exc:
            return None, {"restart": i, "error": str(exc)}

    jobs = list(enumerate(children))
    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    diag, fits = [], []
    for i, (fit, err) in enumerate(results):
        if fit is None:
            diag.append(err)
            continue
        fits.append(fit)
        diag.append(
            {
                "restart": i,
                "marginal_loglik": fit.marginal_loglik,
                "iterations": fit.n_iterations,
                "converged": fit.converged,
                "reseeds": fit.n_reseeds,
            }
        )
    if not fits:
        raise DegenerateClassError(f"every restart failed for {K} classes; try fewer classes")
    best = max(fits, key=lambda f: f.marginal_loglik)
    if not best.converged:
        warnings.warn(f"EM stopped at the iteration cap {cfg.max_iter} without converging", stacklevel=2)
    drops = int(np.sum(np.diff(best.marginal_trace) < -1e-9))
    if drops:
        warnings.warn(f"marginal log likelihood decreased in {drops} EM iterations", stacklevel=2)
    return replace(best, restart_diagnostics=tuple(diag))


@dataclass(frozen=True)
class Prediction:
    """Out-of-sample predictions for a set of persons.

    Attributes
    ----------
    class_probabilities : ndarray, shape (N, K)
    class_choice_probabilities : ndarray, shape (K, n_obs, J)
    choice_probabilities : ndarray, shape (n_obs, J)
        Mixture over classes with the person's class probabilities.
    person_loglik : ndarray, shape (N,)
    """

    class_probabilities: np.ndarray
    class_choice_probabilities: np.ndarray
    choice_probabilities: np.ndarray
    person_loglik: np.ndarray

    @property
    def loglik(self) -> float:
        return float(np.sum(self.person_loglik))


def predict_from_class_probabilities(class_probs, design: UtilityDesign, betas: Sequence[ChoiceParams]) -> Prediction:
    class_probs = np.atleast_2d(np.asarray(class_probs, dtype=float))
    if class_probs.shape != (design.n_persons, len(betas)):
        raise ShapeError(f"class probabilities have shape {class_probs.shape}")
    if design.n_obs == 0:
        empty = np.zeros((len(betas), 0, design.n_alternatives))
        return Prediction(class_probs, empty, np.zeros((0, design.n_alternatives)), np.zeros(design.n_persons))
    per_class = np.stack([choice_probabilities(design.X, design.available, b) for b in betas])
    mix = np.einsum("nk,knj->nj", class_probs[design.person], per_class)
    ll = person_marginal_logliks(class_probs, class_logliks(design, betas))
    return Prediction(class_probs, per_class, mix, ll)


def predict(fitted: FittedGpLccm, S, design: UtilityDesign) -> Prediction:
    """Class probabilities, choice probabilities and mixture log likelihood."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != design.n_persons:
        raise ShapeError(f"{S.shape[0]} feature rows for {design.n_persons} persons")
    if fitted.features is not None and S.shape[0] and S.shape[1] != fitted.features.shape[1]:
        raise ShapeError(f"features have {S.shape[1]} columns, model expects {fitted.features.shape[1]}")
    if S.shape[0] == 0:
        probs = np.zeros((0, fitted.n_classes))
    else:
        probs = fitted.class_probabilities(S)
    return predict_from_class_probabilities(probs, design, fitted.betas)
