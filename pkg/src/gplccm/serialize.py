"""Versioned JSON model artifacts.

Floats are written with ``repr`` precision, so a saved model reloads to
bit-identical parameters. Infinite bounds and undefined standard errors
are stored as ``null``. Laplace states are stored by their posterior
mode and rebuilt without re-running Newton iterations.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Standardization
from .design import utility_spec_from_dict
from .errors import ConfigError
from .gp import OvrClassifier, state_from_mode
from .gp_lccm import FittedGpLccm
from .kernels import parse_kernel
from .lccm import FittedLccm, MembershipParams
from .mnl import ChoiceParams
from .models import FittedModel, ModelSpec

FORMAT = "gplccm-model"
VERSION = 1


def _list(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float).ravel()]


def _array(v, fill: float) -> np.ndarray:
    return np.array([fill if x is None else x for x in v], dtype=float)


def _tuple_json(obj):
    if isinstance(obj, dict):
        return {k: _tuple_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuple_json(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "kind": spec.kind,
        "n_classes": spec.n_classes,
        "utility": spec.utility.to_dict(),
        "kernel": None if spec.kernel is None else spec.kernel.expr(),
        "features": list(spec.features),
        "continuous": list(spec.continuous),
        "fixed": list(spec.fixed),
        "bounds": {k: [None if v is None or np.isinf(v) else v for v in b] for k, b in spec.bounds.items()},
        "restarts": spec.restarts,
        "tol": spec.tol,
        "max_iter": spec.max_iter,
        "hyper_restarts": spec.hyper_restarts,
        "optimize_kernel": spec.optimize_kernel,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        kind=d["kind"],
        utility=utility_spec_from_dict(d["utility"]),
        n_classes=int(d["n_classes"]),
        kernel=None if d.get("kernel") is None else parse_kernel(d["kernel"]),
        features=tuple(d.get("features", ())),
        continuous=tuple(d.get("continuous", ())),
        fixed=tuple(d.get("fixed", ())),
        bounds={k: tuple(v) for k, v in d.get("bounds", {}).items()},
        restarts=int(d.get("restarts", 5)),
        tol=float(d.get("tol", 1e-4)),
        max_iter=int(d.get("max_iter", 500)),
        hyper_restarts=int(d.get("hyper_restarts", 3)),
        optimize_kernel=bool(d.get("optimize_kernel", True)),
    )


def _beta_dict(b: ChoiceParams, se=None, pv=None) -> dict:
    d = {
        "names": list(b.names),
        "beta": _list(b.beta),
        "fixed": [bool(x) for x in b.fixed],
        "lower": _list(b.lower),
        "upper": _list(b.upper),
    }
    if se is not None:
        d["se"] = _list(se)
        d["p_value"] = _list(pv)
    return d


def _beta_from(d: dict) -> ChoiceParams:
    return ChoiceParams(
        tuple(d["names"]),
        np.array(d["beta"], dtype=float),
        np.array(d["fixed"], dtype=bool),
        _array(d["lower"], -np.inf),
        _array(d["upper"], np.inf),
    )


def model_to_dict(fitted: FittedModel, standard_errors: Sequence | None = None) -> dict:
    """Artifact contents; ``standard_errors`` is one ``(se, p)`` pair per class."""
    m = fitted.model
    ses = standard_errors if standard_errors is not None else [(None, None)] * m.n_classes
    out = {
        "format": FORMAT,
        "version": VERSION,
        "spec": spec_to_dict(fitted.spec),
        "alt_ids": list(fitted.alt_ids),
        "standardization": None if fitted.standardization is None else fitted.standardization.to_dict(),
        "n_observations": fitted.n_observations,
        "runtime": fitted.runtime,
        "n_classes": m.n_classes,
        "betas": [_beta_dict(b, se, pv) for b, (se, pv) in zip(m.betas, ses)],
        "responsibilities": np.asarray(m.responsibilities).tolist(),
        "converged": bool(m.converged),
        "restart_diagnostics": _tuple_json(list(m.restart_diagnostics)),
    }
    if isinstance(m, FittedLccm):
        out["membership"] = {
            "gamma": m.membership.gamma.tolist(),
            "feature_names": list(m.membership.feature_names),
            "n_features": int(m.membership.gamma.shape[1] - 1),
        }
        out["trace"] = list(m.trace)
    else:
        out["labels"] = [int(x) for x in m.labels]
        out["marginal_loglik"] = m.marginal_loglik
        out["marginal_trace"] = list(m.marginal_trace)
        out["joint_trace"] = list(m.joint_trace)
        out["mstep_objectives"] = _tuple_json(list(m.mstep_objectives))
        out["n_reseeds"] = m.n_reseeds
        if m.ovr is not None:
            problems = m.ovr.n_binary_problems
            out["gp"] = {
                "features": m.features.tolist(),
                "classifiers": [
                    {"kernel": s.kernel.expr(), "f_hat": s.f_hat.tolist()} for s in m.ovr.states[:problems]
                ],
            }
    return out


def model_from_dict(d: dict) -> FittedModel:
    if d.get("format") != FORMAT:
        raise ConfigError(f"not a model artifact (format {d.get('format')!r})")
    if d.get("version") != VERSION:
        raise ConfigError(f"unsupported artifact version {d.get('version')!r}; this build reads {VERSION}")
    spec = spec_from_dict(d["spec"])
    betas = tuple(_beta_from(b) for b in d["betas"])
    resp = np.array(d["responsibilities"], dtype=float).reshape(-1, len(betas))
    diag = tuple(d.get("restart_diagnostics", ()))
    K = int(d["n_classes"])
    if "membership" in d:
        mem = d["membership"]
        gamma = np.array(mem["gamma"], dtype=float).reshape(K - 1, int(mem["n_features"]) + 1)
        model = FittedLccm(
            K, MembershipParams(gamma, tuple(mem["feature_names"])), betas, resp, tuple(d["trace"]), d["converged"], diag
        )
    else:
        labels = np.array(d["labels"], dtype=int)
        ovr = None
        if d.get("gp") is not None:
            S = np.array(d["gp"]["features"], dtype=float)
            states = []
            for k, c in enumerate(d["gp"]["classifiers"]):
                y = (labels == k).astype(float)
                states.append(state_from_mode(parse_kernel(c["kernel"]), S, y, np.array(c["f_hat"], dtype=float)))
            if K == 2:
                states.append(states[0].mirrored())
            ovr = OvrClassifier(tuple(states))
        model = FittedGpLccm(
            K,
            ovr,
            betas,
            resp,
            labels,
            tuple(d["marginal_trace"]),
            tuple(d["joint_trace"]),
            tuple(tuple(tuple(p) for p in it) for it in d.get("mstep_objectives", ())),
            d["converged"],
            int(d.get("n_reseeds", 0)),
            diag,
            d.get("marginal_loglik"),
        )
    st = None if d.get("standardization") is None else Standardization.from_dict(d["standardization"])
    return FittedModel(spec, model, tuple(d["alt_ids"]), st, int(d["n_observations"]), float(d.get("runtime", 0.0)))


def standard_errors_from_dict(d: dict) -> list[tuple[np.ndarray, np.ndarray]] | None:
    if not all("se" in b for b in d["betas"]):
        return None
    return [(_array(b["se"], np.nan), _array(b["p_value"], np.nan)) for b in d["betas"]]


def save_model(fitted: FittedModel, path: str | Path, standard_errors: Sequence | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(fitted, standard_errors), indent=1))


def load_model(path: str | Path) -> FittedModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model artifact {path} is not valid JSON: {exc}") from None
    return model_from_dict(d)
