"""Local linear explanations of class-membership predictions.

A neighbourhood of the instance is built by resampling every feature
independently from its empirical column. Each sample is weighted by an
exponential kernel on its standardized distance to the instance, and a
weighted least-squares line is fit to the model's class probability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, ShapeError

RIDGE = 1e-6
DEFAULT_SAMPLES = 5000


def perturb(dataset, instance, n_samples: int = DEFAULT_SAMPLES, seed: int | np.random.SeedSequence = 0) -> np.ndarray:
    """Per-column resampling around an instance; row 0 is the instance itself."""
    data = np.atleast_2d(np.asarray(dataset, dtype=float))
    x = np.asarray(instance, dtype=float).reshape(-1)
    if data.shape[0] == 0:
        raise DataError("cannot perturb with an empty dataset")
    if data.shape[1] != x.shape[0]:
        raise ShapeError(f"instance has {x.shape[0]} features, dataset has {data.shape[1]}")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, data.shape[0], size=(n_samples - 1, data.shape[1]))
    out = np.empty((n_samples, data.shape[1]))
    out[0] = x
    out[1:] = np.take_along_axis(data, rows, axis=0) if n_samples > 1 else out[1:]
    return out


def default_width(n_features: int) -> float:
    return 0.75 * np.sqrt(max(n_features, 1))


def proximity_weights(perturbed, instance, width: float, scale=None) -> np.ndarray:
    """``exp(-d^2 / width^2)`` with ``d`` the distance after dividing by ``scale``."""
    if width <= 0:
        raise ValueError("kernel width must be positive")
    Z = np.atleast_2d(np.asarray(perturbed, dtype=float))
    x = np.asarray(instance, dtype=float).reshape(-1)
    s = np.ones_like(x) if scale is None else np.asarray(scale, dtype=float)
    d2 = np.sum(((Z - x) / s) ** 2, axis=1)
    return np.exp(-d2 / width**2)


@dataclass(frozen=True)
class Explanation:
    instance: np.ndarray
    feature_names: tuple[str, ...]
    target_class: int
    weights: np.ndarray
    intercept: float
    predicted_probability: float
    fidelity: float
    ridge: bool = False
    n_samples: int = 0
    width: float = 0.0

    def bar_rows(self) -> list[tuple[str, float, int]]:
        """``(feature, weight, class)`` rows for a horizontal bar chart."""
        return [(f, float(w), self.target_class) for f, w in zip(self.feature_names, self.weights)]

    def to_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "feature_names": list(self.feature_names),
            "instance": self.instance.tolist(),
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "predicted_probability": self.predicted_probability,
            "fidelity": self.fidelity,
            "ridge": self.ridge,
            "n_samples": self.n_samples,
            "width": self.width,
        }


def weighted_least_squares(X, y, w) -> tuple[float, np.ndarray, bool]:
    """Intercept, slopes and whether the ridge fallback was needed."""
    X = np.asarray(X, dtype=float)
    A = np.column_stack([np.ones(X.shape[0]), X])
    sw = np.sqrt(np.asarray(w, dtype=float))
    Aw = A * sw[:, None]
    yw = np.asarray(y, dtype=float) * sw
    ridge = np.linalg.matrix_rank(Aw) < A.shape[1]
    if ridge:
        coef = np.linalg.solve(Aw.T @ Aw + RIDGE * np.eye(A.shape[1]), Aw.T @ yw)
    else:
        coef = np.linalg.lstsq(Aw, yw, rcond=None)[0]
    return float(coef[0]), coef[1:], bool(ridge)


def weighted_r2(y, yhat, w) -> float:
    y, yhat, w = (np.asarray(a, dtype=float) for a in (y, yhat, w))
    ybar = np.sum(w * y) / np.sum(w)
    tot = np.sum(w * (y - ybar) ** 2)
    res = np.sum(w * (y - yhat) ** 2)
    if tot <= 1e-300:
        return 1.0 if res <= 1e-20 else 0.0
    return float(np.clip(1.0 - res / tot, 0.0, 1.0))


def _black_box(model, target_class: int) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "class_probabilities"):
        return lambda Z: np.asarray(model.class_probabilities(Z))[:, target_class]
    if callable(model):
        return lambda Z: np.asarray(model(Z), dtype=float).reshape(-1)
    raise TypeError("model must expose class_probabilities or be callable")


def explain_instance(
    model,
    dataset,
    instance,
    target_class: int = 0,
    feature_names: Sequence[str] | None = None,
    n_samples: int = DEFAULT_SAMPLES,
    width: float | None = None,
    seed: int | np.random.SeedSequence = 0,
) -> Explanation:
    """Fit a weighted linear surrogate to one class probability near ``instance``.

    Parameters
    ----------
    model
        Anything with ``class_probabilities(S) -> (n, K)``, or a callable
        returning the target probability for each row.
    dataset : ndarray, shape (N, D)
        Feature rows the perturbations are resampled from, in the same
        (standardized) space the model consumes.
    width : float, optional
        Kernel width in standardized units; defaults to ``0.75 * sqrt(D)``.
    """
    data = np.atleast_2d(np.asarray(dataset, dtype=float))
    x = np.asarray(instance, dtype=float).reshape(-1)
    D = data.shape[1]
    names = tuple(feature_names) if feature_names is not None else tuple(f"s{i + 1}" for i in range(D))
    if len(names) != D:
        raise ShapeError(f"{len(names)} feature names for {D} features")
    width = default_width(D) if width is None else float(width)
    Z = perturb(data, x, n_samples, seed)
    scale = data.std(axis=0)
    scale[scale <= 0] = 1.0
    w = proximity_weights(Z, x, width, scale)
    f = _black_box(model, target_class)
    y = f(Z)
    intercept, coef, ridge = weighted_least_squares(Z, y, w)
    fidelity = weighted_r2(y, intercept + Z @ coef, w)
    return Explanation(x, names, int(target_class), coef, intercept, float(y[0]), fidelity, ridge, n_samples, width)
