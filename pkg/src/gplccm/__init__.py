"""Latent class choice models with Gaussian-process class membership."""

from .data import (
    ChoicePanel,
    CountUtilitySpec,
    PanelSchema,
    PersonFeatures,
    enumerate_count_alternatives,
    load_features,
    load_panel,
    standardize_features,
)
from .design import LinearUtilitySpec, UtilityDesign, build_design
from .evaluation import FitReport, aic, bic, count_parameters, kfold_cv, value_of_time
from .gp_lccm import FittedGpLccm, GpLccmConfig, fit_gp_lccm, predict
from .interpret import explain_instance
from .kernels import Constant, Matern, SquaredExponential, parse_kernel
from .lccm import FittedLccm, fit_lccm
from .mnl import ChoiceParams, fit_mnl, maximize_weighted
from .models import FittedModel, ModelSpec, fit_model
from .serialize import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "ChoicePanel",
    "ChoiceParams",
    "Constant",
    "CountUtilitySpec",
    "FitReport",
    "FittedGpLccm",
    "FittedLccm",
    "FittedModel",
    "GpLccmConfig",
    "LinearUtilitySpec",
    "Matern",
    "ModelSpec",
    "PanelSchema",
    "PersonFeatures",
    "SquaredExponential",
    "UtilityDesign",
    "aic",
    "bic",
    "build_design",
    "count_parameters",
    "enumerate_count_alternatives",
    "explain_instance",
    "fit_gp_lccm",
    "fit_lccm",
    "fit_mnl",
    "fit_model",
    "kfold_cv",
    "load_features",
    "load_model",
    "load_panel",
    "maximize_weighted",
    "parse_kernel",
    "predict",
    "save_model",
    "standardize_features",
    "value_of_time",
]
