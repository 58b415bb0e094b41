"""Model selection metrics, parameter counting, cross-validation and value of time."""

from __future__ import annotations

import io
import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import ChoicePanel, PersonFeatures
from .errors import FoldSizeError, UndefinedVOTError
from .gp_lccm import FittedGpLccm
from .kernels import Kernel
from .lccm import FittedLccm
from .models import FittedModel, ModelSpec, fit_model

NEAR_ZERO_COST = 1e-6


def aic(M: int, loglik: float) -> float:
    if M < 1:
        raise ValueError("parameter count must be at least 1")
    return 2.0 * M - 2.0 * loglik


def bic(M: int, loglik: float, D: int) -> float:
    """Bayesian information criterion with ``D`` observations (natural log)."""
    if M < 1 or D < 1:
        raise ValueError("parameter and observation counts must be at least 1")
    return M * math.log(D) - 2.0 * loglik


def kernel_parameter_count(kernels: Sequence[Kernel], n_classes: int) -> int:
    """Hyperparameters over the distinct binary problems.

    With two classes the second classifier mirrors the first, so only one
    kernel is counted; with more classes every class-versus-rest
    classifier carries its own hyperparameters. A Matérn smoothness
    counts as a parameter even though it is not optimized.
    """
    if n_classes < 2:
        return 0
    problems = 1 if n_classes == 2 else n_classes
    return sum(k.n_counted for k in list(kernels)[:problems])


def count_parameters(model: FittedLccm | FittedGpLccm | FittedModel) -> int:
    """Free choice coefficients plus the membership model's parameters."""
    if isinstance(model, FittedModel):
        model = model.model
    choice = sum(b.n_free for b in model.betas)
    if isinstance(model, FittedLccm):
        return choice + model.membership.gamma.size
    return choice + kernel_parameter_count(model.kernels, model.n_classes)


class ValueOfTime(float):
    """A float carrying a flag for a near-zero cost coefficient."""

    near_zero_cost: bool = False


def value_of_time(beta_time: float, beta_cost: float, conversion: float = 1.0) -> ValueOfTime:
    """Ratio of time to cost coefficients scaled to currency per hour.

    Raises
    ------
    UndefinedVOTError
        If ``beta_cost`` is exactly zero.
    """
    if beta_cost == 0:
        raise UndefinedVOTError("cost coefficient is zero; value of time is undefined")
    out = ValueOfTime(beta_time / beta_cost * conversion)
    if abs(beta_cost) < NEAR_ZERO_COST:
        out.near_zero_cost = True
        warnings.warn(f"cost coefficient {beta_cost:g} is close to zero; value of time is unstable", stacklevel=2)
    return out


@dataclass
class FitReport:
    kind: str
    n_classes: int
    n_parameters: int
    marginal_loglik: float
    aic: float
    bic: float
    n_observations: int
    joint_loglik: float | None = None
    cv_mean_fold_loglik: float | None = None
    cv_mean_person_loglik: float | None = None
    runtime: float | None = None

    @classmethod
    def from_model(cls, fitted: FittedModel, cv: "CrossValidation | None" = None) -> "FitReport":
        M = count_parameters(fitted)
        LL = fitted.marginal_loglik
        D = fitted.n_observations
        return cls(
            fitted.spec.kind,
            fitted.n_classes,
            M,
            LL,
            aic(M, LL),
            bic(M, LL, D),
            D,
            fitted.joint_loglik,
            None if cv is None else cv.mean_fold_loglik,
            None if cv is None else cv.mean_person_loglik,
            fitted.runtime,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}: {_fmt(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "FitReport":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition(":")
                kv[k.strip()] = v.strip()
        ints = {"n_classes", "n_parameters", "n_observations"}
        out = {}
        for k, v in kv.items():
            if v == "NA":
                out[k] = None
            elif k in ints:
                out[k] = int(v)
            elif k == "kind":
                out[k] = v
            else:
                out[k] = float(v)
        return cls(**out)


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


COMPARISON_COLUMNS = (
    "kind",
    "n_classes",
    "n_parameters",
    "joint_loglik",
    "marginal_loglik",
    "aic",
    "bic",
    "cv_mean_fold_loglik",
    "cv_mean_person_loglik",
    "runtime",
)


def comparison_table(reports: Sequence[FitReport], delimiter: str = ",") -> str:
    """One row per model, columns laid out like a model comparison table."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for r in reports:
        d = r.to_dict()
        w.writerow([_fmt(d[c]) for c in COMPARISON_COLUMNS])
    return buf.getvalue()


def fold_assignments(n_persons: int, k: int, seed: int | np.random.SeedSequence = 0) -> list[np.ndarray]:
    """Shuffle person indices with ``seed`` and split into ``k`` near-equal folds.

    Folds depend on the input order of persons: the permutation is
    applied to positions, not to person ids.
    """
    if k < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    if k > n_persons:
        raise FoldSizeError(f"{k} folds for {n_persons} persons")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    perm = np.random.default_rng(ss).permutation(n_persons)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass(frozen=True)
class CrossValidation:
    """Held-out predictive log likelihoods.

    Attributes
    ----------
    fold_loglik : ndarray
        Total held-out log likelihood of each fold.
    person_loglik : ndarray
        Held-out log likelihood of every person, in input order.
    folds : list of ndarray
        Person indices of each test fold.
    """

    fold_loglik: np.ndarray
    person_loglik: np.ndarray
    folds: tuple

    @property
    def mean_fold_loglik(self) -> float:
        return float(np.mean(self.fold_loglik))

    @property
    def mean_person_loglik(self) -> float:
        return float(np.mean(self.person_loglik))


def kfold_cv(
    spec: ModelSpec,
    panel: ChoicePanel,
    features: PersonFeatures | None = None,
    k: int = 5,
    seed: int | np.random.SeedSequence = 0,
    threads: int = 1,
    folds: Sequence[np.ndarray] | None = None,
) -> CrossValidation:
    """Fit on all but one fold and score the held-out persons, for each fold.

    Folds partition persons, never scenarios. The feature
    standardization is refit on every training split and replayed on the
    held-out persons. Pass ``folds`` to reuse an assignment across models.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    fold_ss, fit_ss = ss.spawn(2)
    if folds is None:
        folds = fold_assignments(panel.n_persons, k, fold_ss)
    for f in folds:
        if len(f) < spec.n_classes:
            raise FoldSizeError(f"a fold has {len(f)} persons, fewer than {spec.n_classes} classes")
    seeds = fit_ss.spawn(len(folds))

    def one(i):
        test = folds[i]
        train = np.setdiff1d(np.arange(panel.n_persons), test)
        fitted = fit_model(spec, panel.subset(train), features, seeds[i])
        pred = fitted.predict(panel.subset(test), features)
        return pred.person_loglik

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_fold = list(pool.map(one, range(len(folds))))
    else:
        per_fold = [one(i) for i in range(len(folds))]
    person = np.zeros(panel.n_persons)
    for f, ll in zip(folds, per_fold):
        person[f] = ll
    return CrossValidation(np.array([ll.sum() for ll in per_fold]), person, tuple(folds))
