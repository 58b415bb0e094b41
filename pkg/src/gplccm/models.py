"""One entry point for the three model kinds: mnl, lccm and gp-lccm.

A :class:`ModelSpec` says what to fit; :func:`fit_model` turns a panel
and raw person features into a :class:`FittedModel` that carries
everything needed to predict on new persons, including the feature
standardization learned on the training persons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .data import (
    ChoicePanel,
    CountUtilitySpec,
    PersonFeatures,
    Standardization,
    apply_standardization,
    standardize_features,
)
from .design import LinearUtilitySpec, UtilityDesign, build_design
from .errors import ConfigError, ShapeError
from .gp_lccm import FittedGpLccm, GpLccmConfig, Prediction, fit_gp_lccm, predict_from_class_probabilities
from .kernels import Kernel
from .lccm import FittedLccm, fit_lccm
from .mnl import ChoiceParams

KINDS = ("mnl", "lccm", "gp-lccm")


@dataclass(frozen=True)
class ModelSpec:
    """What to estimate.

    Attributes
    ----------
    kind : {"mnl", "lccm", "gp-lccm"}
    features : tuple of str
        Membership feature columns, already numerically encoded.
    continuous : tuple of str
        Subset of ``features`` standardized with training statistics.
    fixed, bounds
        Coefficients held at zero, and box bounds by coefficient name.
    """

    kind: str
    utility: LinearUtilitySpec | CountUtilitySpec
    n_classes: int = 1
    kernel: Kernel | None = None
    features: tuple[str, ...] = ()
    continuous: tuple[str, ...] = ()
    fixed: tuple[str, ...] = ()
    bounds: Mapping[str, tuple] = field(default_factory=dict)
    restarts: int = 5
    tol: float = 1e-4
    max_iter: int = 500
    hyper_restarts: int = 3
    optimize_kernel: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "mnl" and self.n_classes != 1:
            raise ConfigError("an mnl model has exactly one class")
        if self.n_classes < 1:
            raise ConfigError("the number of classes must be at least 1")
        if self.tol <= 0:
            raise ConfigError("the convergence tolerance must be positive")
        if self.kind == "gp-lccm" and self.n_classes > 1 and self.kernel is None:
            raise ConfigError("a gp-lccm model needs a kernel")
        missing = set(self.continuous) - set(self.features)
        if missing:
            raise ConfigError(f"continuous columns {sorted(missing)} are not membership features")
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "fixed", tuple(self.fixed))

    def template(self) -> ChoiceParams:
        return ChoiceParams.create(self.utility.names, fixed=self.fixed, bounds=self.bounds)

    def with_classes(self, n_classes: int) -> "ModelSpec":
        return replace(self, n_classes=int(n_classes))


@dataclass(frozen=True)
class FittedModel:
    spec: ModelSpec
    model: FittedLccm | FittedGpLccm
    alt_ids: tuple[str, ...]
    standardization: Standardization | None
    n_observations: int
    runtime: float = 0.0

    @property
    def n_classes(self) -> int:
        return self.model.n_classes

    @property
    def betas(self) -> tuple[ChoiceParams, ...]:
        return self.model.betas

    @property
    def marginal_loglik(self) -> float:
        return self.model.marginal_loglik

    @property
    def joint_loglik(self) -> float | None:
        return self.model.joint_loglik if isinstance(self.model, FittedGpLccm) else None

    def design(self, panel: ChoicePanel) -> UtilityDesign:
        return build_design(panel, self.spec.utility, self.alt_ids)

    def feature_matrix(self, features: PersonFeatures | None, panel: ChoicePanel) -> np.ndarray:
        return membership_matrix(self.spec, features, panel.person_ids, self.standardization)[0]

    def class_probabilities(self, S: np.ndarray) -> np.ndarray:
        return self.model.class_probabilities(S)

    def predict(self, panel: ChoicePanel, features: PersonFeatures | None = None) -> Prediction:
        d = self.design(panel)
        S = self.feature_matrix(features, panel)
        probs = self.class_probabilities(S) if panel.n_persons else np.zeros((0, self.n_classes))
        return predict_from_class_probabilities(probs, d, self.betas)


def membership_matrix(
    spec: ModelSpec,
    features: PersonFeatures | None,
    person_ids: Sequence[str],
    standardization: Standardization | None = None,
) -> tuple[np.ndarray, Standardization | None]:
    """Membership features in ``person_ids`` order.

    Fits the standardization when none is given, otherwise replays it.
    """
    if not spec.features:
        return np.zeros((len(person_ids), 0)), None
    if features is None:
        raise ShapeError("this model needs person features")
    if len(person_ids) == 0:
        return np.zeros((0, len(spec.features))), standardization
    f = features.align(person_ids).select(spec.features)
    if spec.continuous:
        if standardization is None:
            f = standardize_features(f, spec.continuous)
            standardization = f.standardization
        else:
            f = apply_standardization(f, standardization)
    return f.matrix, standardization


def fit_model(
    spec: ModelSpec,
    panel: ChoicePanel,
    features: PersonFeatures | None = None,
    seed: int | np.random.SeedSequence = 0,
) -> FittedModel:
    start = time.perf_counter()
    design = build_design(panel, spec.utility)
    S, st = membership_matrix(spec, features, panel.person_ids)
    template = spec.template()
    if spec.kind in ("mnl", "lccm"):
        restarts = 1 if spec.n_classes == 1 else spec.restarts
        model = fit_lccm(
            design,
            S,
            spec.n_classes,
            template,
            seed=seed,
            restarts=restarts,
            tol=spec.tol,
            max_iter=spec.max_iter,
            feature_names=spec.features,
            threads=spec.threads,
        )
    else:
        cfg = GpLccmConfig(
            restarts=spec.restarts,
            tol=spec.tol,
            max_iter=spec.max_iter,
            hyper_restarts=spec.hyper_restarts,
            optimize_kernel=spec.optimize_kernel,
            threads=spec.threads,
        )
        model = fit_gp_lccm(design, S, spec.n_classes, spec.kernel, template, seed=seed, config=cfg)
    return FittedModel(spec, model, design.alt_ids, st, design.n_obs, time.perf_counter() - start)
