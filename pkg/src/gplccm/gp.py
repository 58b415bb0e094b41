"""Binary Gaussian-process classification with the Laplace approximation.

Mode finding, prediction and the marginal-likelihood gradient follow
Rasmussen & Williams (2006), algorithms 3.1, 3.2 and 5.1, with the
logistic link. Labels are 0/1 externally and mapped to -1/+1 inside.
Multiclass membership uses one-versus-rest binary classifiers whose
probabilities are renormalised to sum to one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit

from .errors import (
    ConditioningError,
    ConvergenceError,
    DegenerateClassError,
    OptimizationError,
    ShapeError,
)
from .kernels import Kernel, kernel_matrix

log = logging.getLogger(__name__)

GH_ORDER = 20
_GH_X, _GH_W = hermgauss(GH_ORDER)

MODE_TOL = 1e-10
MODE_MAX_ITER = 100
HYPER_BOUNDS = (np.log(1e-3), np.log(1e3))


def sigmoid(f):
    """Logistic function, safe against overflow for large |f|."""
    return expit(f)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be a vector of 0/1 values")
    return y.astype(float)


@dataclass(frozen=True)
class LaplaceState:
    """Gaussian approximation to the latent posterior at its mode.

    ``L`` is the lower Cholesky factor of ``I + sqrt(W) K sqrt(W)``;
    ``grad`` is the log-likelihood gradient at the mode, so that
    ``f_hat = K @ grad`` at convergence.
    """

    f_hat: np.ndarray
    W: np.ndarray
    L: np.ndarray
    grad: np.ndarray
    log_marginal_likelihood: float
    labels: np.ndarray
    K: np.ndarray
    features: np.ndarray | None = None
    kernel: Kernel | None = None
    iterations: int = 0

    @property
    def n(self) -> int:
        return self.f_hat.shape[0]

    def training_probabilities(self) -> np.ndarray:
        return training_probabilities(self)

    def latent_moments(self, Q) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance of the latent function at query rows."""
        if self.features is None or self.kernel is None:
            raise ValueError("state was built without features/kernel and cannot predict")
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[1] != self.features.shape[1]:
            raise ShapeError(f"query has {Q.shape[1]} features, model expects {self.features.shape[1]}")
        Ks = self.kernel(self.features, Q)
        mean = Ks.T @ self.grad
        v = solve_triangular(self.L, np.sqrt(self.W)[:, None] * Ks, lower=True)
        var = self.kernel.diag(Q) - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    def predict(self, Q) -> np.ndarray:
        mean, var = self.latent_moments(Q)
        return averaged_sigmoid(mean, var)

    def mirrored(self) -> "LaplaceState":
        """State for the complementary labels (exact under a zero-mean prior)."""
        return replace(self, f_hat=-self.f_hat, grad=-self.grad, labels=1.0 - self.labels)


def averaged_sigmoid(mean, var) -> np.ndarray:
    """E[sigmoid(z)] for z ~ N(mean, var), by Gauss-Hermite quadrature."""
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(2.0 * np.asarray(var, dtype=float))
    z = mean[..., None] + sd[..., None] * _GH_X
    return expit(z) @ _GH_W / np.sqrt(np.pi)


def _objective(a, f, y):
    return -0.5 * a @ f + np.sum(_log_sigmoid(y * f))


def _newton_pieces(K, f, t):
    pi, qi = expit(f), expit(-f)
    # both tails kept so W and t - pi stay accurate when the sigmoid saturates
    W = pi * qi
    sW = np.sqrt(W)
    B = np.eye(len(f)) + sW[:, None] * K * sW[None, :]
    try:
        L = cholesky(B, lower=True)
    except np.linalg.LinAlgError:
        raise ConditioningError("I + W^1/2 K W^1/2 is not positive definite") from None
    return pi, W, sW, L, np.where(t > 0.5, qi, -pi)


def laplace_mode(
    C,
    labels,
    a_init=None,
    tol: float = MODE_TOL,
    max_iter: int = MODE_MAX_ITER,
    features=None,
    kernel: Kernel | None = None,
) -> LaplaceState:
    """Posterior mode of the latent values by damped Newton iteration.

    ``a_init`` warm-starts the iteration at ``f = C @ a_init``.
    """
    K = np.asarray(C, dtype=float)
    t = _check_labels(labels)
    if K.shape != (len(t), len(t)):
        raise ShapeError(f"covariance shape {K.shape} does not match {len(t)} labels")
    y = 2.0 * t - 1.0
    a = np.zeros(len(t)) if a_init is None else np.array(a_init, dtype=float)
    f = K @ a
    obj = _objective(a, f, y)
    delta = np.inf
    for it in range(1, max_iter + 1):
        pi, W, sW, L, g = _newton_pieces(K, f, t)
        b = W * f + g
        c = solve_triangular(L, sW * (K @ b), lower=True)
        a_new = b - sW * solve_triangular(L.T, c, lower=False)
        step = a_new - a
        # ties at rounding level are accepted only for moves short enough to be in
        # the quadratic regime; a long move with no gain straddles the mode
        slack = 1e-13 * (1.0 + abs(obj))
        scale = 1.0 + np.max(np.abs(f), initial=0.0)
        small = 1e-8 * scale
        alpha = 1.0
        for _ in range(11):
            a_try = a + alpha * step
            f_try = K @ a_try
            obj_try = _objective(a_try, f_try, y)
            if obj_try > obj + slack:
                break
            if obj_try >= obj - slack and np.max(np.abs(f_try - f), initial=0.0) < 1e-4 * scale:
                break
            alpha *= 0.5
        else:
            # no ascent along the Newton direction: at the mode to working precision
            break
        delta = obj_try - obj
        moved = np.max(np.abs(f_try - f), initial=0.0)
        a, f, obj = a_try, f_try, obj_try
        # objective change alone cannot resolve the mode beyond ~sqrt(eps)
        if abs(delta) < tol and moved < small:
            break
    else:
        raise ConvergenceError(
            f"Laplace mode not found within {max_iter} Newton iterations (last change {delta:.3g})",
            last_delta=delta,
        )
    return _state_at(K, t, f, features, kernel, iterations=it)


def _state_at(K, t, f, features=None, kernel=None, iterations=0) -> LaplaceState:
    pi, W, sW, L, g = _newton_pieces(K, f, t)
    y = 2.0 * t - 1.0
    lml = -0.5 * g @ f + np.sum(_log_sigmoid(y * f)) - np.sum(np.log(np.diag(L)))
    return LaplaceState(
        f_hat=f,
        W=W,
        L=L,
        grad=g,
        log_marginal_likelihood=float(lml),
        labels=t,
        K=K,
        features=None if features is None else np.asarray(features, dtype=float),
        kernel=kernel,
        iterations=iterations,
    )


def state_from_mode(kernel: Kernel, S, labels, f_hat, jitter: float | None = None) -> LaplaceState:
    """Rebuild a state from a stored mode without re-running Newton."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    K = kernel_matrix(kernel, S, jitter)
    return _state_at(K, _check_labels(labels), np.asarray(f_hat, dtype=float), S, kernel)


def fit_laplace(kernel: Kernel, S, labels, jitter: float | None = None, a_init=None) -> LaplaceState:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    K = kernel_matrix(kernel, S, jitter)
    return laplace_mode(K, labels, a_init=a_init, features=S, kernel=kernel)


def laplace_predict(state: LaplaceState, spec: Kernel | None, query) -> float | np.ndarray:
    """Averaged predictive probability of label 1 at one query row (or several)."""
    if spec is not None and state.kernel is not None and spec != state.kernel:
        raise ValueError("state was trained with a different kernel")
    q = np.asarray(query, dtype=float)
    p = state.predict(np.atleast_2d(q))
    return float(p[0]) if q.ndim == 1 else p


def training_probabilities(state: LaplaceState) -> np.ndarray:
    """Plug-in class-1 probabilities sigmoid(f_hat) at the training rows."""
    return expit(state.f_hat)


def _lml_gradient(state: LaplaceState, dK: Sequence[np.ndarray]) -> np.ndarray:
    K, W, L, g, f = state.K, state.W, state.L, state.grad, state.f_hat
    sW = np.sqrt(W)
    R = sW[:, None] * cho_solve((L, True), np.diag(sW))
    Cm = solve_triangular(L, sW[:, None] * K, lower=True)
    # dW/df = -(third derivative of log p) = W (1 - 2 pi)
    dW = W * (expit(-f) - expit(f))
    s2 = -0.5 * (np.diag(K) - np.sum(Cm * Cm, axis=0)) * dW
    out = np.empty(len(dK))
    for j, Cj in enumerate(dK):
        s1 = 0.5 * g @ Cj @ g - 0.5 * np.sum(R * Cj)
        b = Cj @ g
        s3 = b - K @ (R @ b)
        out[j] = s1 + s2 @ s3
    return out


def log_marginal_likelihood_and_gradient(
    spec: Kernel, S, labels, jitter: float | None = None, a_init=None
) -> tuple[float, np.ndarray]:
    """Laplace log marginal likelihood and its gradient w.r.t. log-hyperparameters.

    The gradient includes the implicit dependence of the mode on the
    hyperparameters.
    """
    state = fit_laplace(spec, S, labels, jitter, a_init)
    return state.log_marginal_likelihood, _lml_gradient(state, spec.gradients(state.features))


@dataclass
class HyperFitResult:
    kernel: Kernel
    log_marginal_likelihood: float
    diagnostics: list = field(default_factory=list)


def fit_hyperparameters(
    spec: Kernel,
    S,
    labels,
    restarts: int = 1,
    rng: np.random.Generator | None = None,
    bounds: tuple[float, float] = HYPER_BOUNDS,
    jitter: float | None = None,
    maxiter: int = 200,
) -> HyperFitResult:
    """Maximise the Laplace marginal likelihood over the kernel's log-hyperparameters.

    The first start is ``spec`` itself (warm start); further starts draw
    log-hyperparameters uniformly in [log 0.1, log 10]. The best result
    over all starts is returned.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    t = _check_labels(labels)
    if len(t) < 2 or t.min() == t.max():
        raise DegenerateClassError("hyperparameter fitting needs both label values present")
    if spec.n_free == 0:
        lml = fit_laplace(spec, S, t, jitter).log_marginal_likelihood
        return HyperFitResult(spec, lml)
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = bounds
    starts = [np.clip(spec.theta, lo, hi)]
    for _ in range(max(restarts, 1) - 1):
        starts.append(rng.uniform(np.log(0.1), np.log(10.0), size=spec.n_free))

    best, diagnostics = None, []
    for k, x0 in enumerate(starts):
        warm = {"a": None}

        def neg(theta):
            state = fit_laplace(spec.with_theta(theta), S, t, jitter, warm["a"])
            warm["a"] = state.grad
            g = _lml_gradient(state, state.kernel.gradients(S))
            return -state.log_marginal_likelihood, -g

        try:
            res = minimize(
                neg, x0, jac=True, method="L-BFGS-B", bounds=[(lo, hi)] * len(x0), options={"maxiter": maxiter}
            )
        except (ConvergenceError, ConditioningError, FloatingPointError) as exc:
            diagnostics.append({"start": k, "error": str(exc)})
            continue
        if not np.isfinite(res.fun):
            diagnostics.append({"start": k, "error": "non-finite objective"})
            continue
        diagnostics.append({"start": k, "lml": -float(res.fun), "nit": int(res.nit), "message": str(res.message)})
        if best is None or -res.fun > best.log_marginal_likelihood:
            best = HyperFitResult(spec.with_theta(res.x), -float(res.fun))
    if best is None:
        raise OptimizationError("every hyperparameter start failed", diagnostics)
    best.diagnostics = diagnostics
    return best


# ---------------------------------------------------------------------------
# one-versus-rest


@dataclass(frozen=True)
class OvrClassifier:
    """K binary class-k-versus-rest Laplace classifiers on shared features.

    With two classes the second classifier is the exact mirror of the
    first, so only one binary problem is solved.
    """

    states: tuple[LaplaceState, ...]

    @property
    def n_classes(self) -> int:
        return len(self.states)

    @property
    def kernels(self) -> tuple[Kernel, ...]:
        return tuple(s.kernel for s in self.states)

    @property
    def n_binary_problems(self) -> int:
        return 1 if self.n_classes == 2 else self.n_classes

    def training_probabilities(self) -> np.ndarray:
        P = np.column_stack([training_probabilities(s) for s in self.states])
        return normalize_ovr(P)

    def predict(self, Q) -> np.ndarray:
        P = np.column_stack([s.predict(Q) for s in self.states])
        return normalize_ovr(P)


def normalize_ovr(P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return P / P.sum(axis=1, keepdims=True)


def ovr_predict(ovr: OvrClassifier, query=None, index: int | None = None) -> np.ndarray:
    """Normalised class probabilities at a query row or a training index."""
    if index is not None:
        return ovr.training_probabilities()[index]
    q = np.asarray(query, dtype=float)
    P = ovr.predict(np.atleast_2d(q))
    return P[0] if q.ndim == 1 else P


def ovr_fit(
    S,
    labels,
    spec: Kernel | Sequence[Kernel],
    n_classes: int | None = None,
    optimize: bool = True,
    restarts: int = 1,
    rng: np.random.Generator | None = None,
    jitter: float | None = None,
) -> OvrClassifier:
    """Fit class-k-versus-rest classifiers, optionally optimising each kernel.

    ``spec`` may be a single kernel shared as the starting point or one
    kernel per class (warm starts from a previous fit).
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    labels = np.asarray(labels, dtype=int)
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    if K < 2:
        raise DegenerateClassError("one-versus-rest needs at least two classes")
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec] * K
    if len(specs) != K:
        raise ValueError(f"got {len(specs)} kernels for {K} classes")
    counts = np.bincount(labels, minlength=K)
    for k in range(K):
        if counts[k] == 0:
            raise DegenerateClassError(f"class {k} has no members")
        if counts[k] == len(labels):
            raise DegenerateClassError(f"class {k} contains every person")
    rng = rng if rng is not None else np.random.default_rng(0)

    n_problems = 1 if K == 2 else K
    states = []
    for k in range(n_problems):
        y = (labels == k).astype(float)
        kern = specs[k]
        if optimize:
            kern = fit_hyperparameters(kern, S, y, restarts=restarts, rng=rng, jitter=jitter).kernel
        states.append(fit_laplace(kern, S, y, jitter))
    if K == 2:
        states.append(states[0].mirrored())
    return OvrClassifier(tuple(states))
