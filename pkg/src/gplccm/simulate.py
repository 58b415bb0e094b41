"""Synthetic panel choice data with latent classes.

Person features are standard normal. Classes come from a membership
rule, either a linear logit in the features or a radial rule that puts
persons inside a disc in the first two features in class 0. Choices are
drawn from each class's logit probabilities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import ChoicePanel, PersonFeatures, PersonRecord, Scenario, write_features, write_panel
from .design import LinearUtilitySpec, utility_spec_from_dict
from .errors import ConfigError

# median radius of a 2-D standard normal: P(|s| < r) = 1/2
MEDIAN_RADIUS_2D = math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class SimulatedData:
    panel: ChoicePanel
    features: PersonFeatures
    classes: np.ndarray
    truth: dict


def _membership(rule: Mapping, S: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    kind = rule.get("type", "radial")
    N = S.shape[0]
    if K == 1:
        return np.zeros(N, dtype=int)
    if kind == "radial":
        if K != 2:
            raise ConfigError("the radial membership rule needs exactly 2 classes")
        if S.shape[1] < 2:
            raise ConfigError("the radial membership rule needs at least 2 features")
        radius = float(rule.get("radius", MEDIAN_RADIUS_2D))
        classes = (np.hypot(S[:, 0], S[:, 1]) >= radius).astype(int)
    elif kind == "linear":
        gamma = np.asarray(rule.get("gamma"), dtype=float)
        if gamma.shape != (K - 1, S.shape[1] + 1):
            raise ConfigError(f"linear membership gamma must have shape {(K - 1, S.shape[1] + 1)}")
        U = np.column_stack([np.ones(N), S]) @ np.vstack([gamma, np.zeros(S.shape[1] + 1)]).T
        G = rng.gumbel(size=U.shape)
        classes = np.argmax(U + G, axis=1)
    else:
        raise ConfigError(f"unknown membership rule {kind!r}")
    noise = float(rule.get("noise", 0.0))
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("membership noise must lie in [0, 1]")
    if noise > 0:
        flip = rng.random(N) < noise
        classes[flip] = rng.integers(0, K, size=int(flip.sum()))
    return classes


def simulate(config: Mapping, seed: int | np.random.SeedSequence = 0) -> SimulatedData:
    """Draw a synthetic population.

    ``config`` keys: ``n_persons``, ``n_scenarios``, ``n_alternatives``,
    ``n_features``, ``attributes`` (names drawn per alternative),
    ``attribute_range`` ``[low, high]``, ``utility`` (a utility spec
    dict), ``betas`` (one name-to-value mapping per class) and
    ``membership`` (rule dict).
    """
    try:
        N = int(config["n_persons"])
        T = int(config["n_scenarios"])
        J = int(config["n_alternatives"])
        betas_cfg = list(config["betas"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid generator config: {exc}") from None
    D = int(config.get("n_features", 2))
    attrs = tuple(config.get("attributes", ("x1", "x2")))
    lo, hi = (float(v) for v in config.get("attribute_range", (-2.0, 2.0)))
    K = len(betas_cfg)
    if N < 1 or T < 1 or J < 2 or K < 1 or D < 0 or hi < lo:
        raise ConfigError("generator needs n_persons, n_scenarios >= 1, n_alternatives >= 2 and one class")
    alt_ids = tuple(str(j) for j in range(J))
    spec_dict = config.get("utility") or {"type": "linear", "asc": list(alt_ids[1:]), "generic": list(attrs)}
    spec = utility_spec_from_dict(spec_dict)
    if not isinstance(spec, LinearUtilitySpec):
        raise ConfigError("the generator supports linear utility specifications only")
    names = spec.names
    B = np.zeros((K, len(names)))
    for k, b in enumerate(betas_cfg):
        unknown = set(b) - set(names)
        if unknown:
            raise ConfigError(f"class {k} sets unknown coefficients {sorted(unknown)}")
        B[k] = [float(b.get(n, 0.0)) for n in names]

    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    S = rng.standard_normal((N, D))
    classes = _membership(config.get("membership", {"type": "radial"}), S, K, rng)

    persons = []
    avail = np.ones(J, dtype=bool)
    for n in range(N):
        scen = []
        for t in range(T):
            A = rng.uniform(lo, hi, size=(J, len(attrs)))
            X = np.array([spec.design_row(a, A[j], attrs) for j, a in enumerate(alt_ids)])
            V = X @ B[classes[n]]
            chosen = int(np.argmax(V + rng.gumbel(size=J)))
            scen.append(Scenario(str(t), alt_ids, avail.copy(), chosen, A))
        persons.append(PersonRecord(f"p{n:05d}", tuple(scen)))
    panel = ChoicePanel(tuple(persons), attrs)
    feat_names = tuple(f"s{i + 1}" for i in range(D))
    features = PersonFeatures(S, feat_names, panel.person_ids)
    truth = {
        "n_classes": K,
        "utility": spec.to_dict(),
        "betas": [dict(zip(names, map(float, row))) for row in B],
        "classes": {pid: int(c) for pid, c in zip(panel.person_ids, classes)},
        "membership": dict(config.get("membership", {"type": "radial"})),
    }
    return SimulatedData(panel, features, classes, truth)


def write_simulation(data: SimulatedData, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"choices": out / "choices.csv", "persons": out / "persons.csv", "truth": out / "truth.json"}
    write_panel(data.panel, paths["choices"])
    write_features(data.features, paths["persons"])
    paths["truth"].write_text(json.dumps(data.truth, indent=2))
    return paths


def recovery_config(n_persons: int = 500, n_scenarios: int = 4) -> dict:
    """Two-class population with a radial membership rule and distinct tastes."""
    return {
        "n_persons": n_persons,
        "n_scenarios": n_scenarios,
        "n_alternatives": 3,
        "n_features": 2,
        "attributes": ["x1", "x2"],
        "attribute_range": [-2.0, 2.0],
        "utility": {"type": "linear", "generic": ["x1", "x2"]},
        "betas": [
            {"B_x1": -2.0, "B_x2": 1.0},
            {"B_x1": 1.0, "B_x2": -2.0},
        ],
        "membership": {"type": "radial"},
    }
