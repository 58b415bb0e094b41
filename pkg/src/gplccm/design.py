"""Dense utility design arrays built from a choice panel.

Every scenario is laid out over the union of alternative ids seen in the
panel, so a design is a single ``(n_obs, J, P)`` array plus an
availability mask. Alternatives a scenario does not offer are padded and
marked unavailable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ChoicePanel, CountUtilitySpec, build_count_design_row
from .errors import ConfigError, DataError, ShapeError


@dataclass(frozen=True)
class LinearUtilitySpec:
    """Linear-in-parameters utility for a fixed set of labelled alternatives.

    Parameters
    ----------
    asc : sequence of str
        Alternatives that receive an alternative-specific constant. Any
        alternative left out acts as the base.
    generic : sequence of str
        Attributes sharing one coefficient across alternatives.
    specific : mapping
        ``attribute -> alternatives`` with one coefficient per listed
        alternative.
    """

    asc: tuple[str, ...] = ()
    generic: tuple[str, ...] = ()
    specific: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "asc", tuple(str(a) for a in self.asc))
        object.__setattr__(self, "generic", tuple(self.generic))
        object.__setattr__(
            self, "specific", {a: tuple(str(x) for x in alts) for a, alts in self.specific.items()}
        )

    @property
    def names(self) -> tuple[str, ...]:
        out = [f"ASC_{a}" for a in self.asc]
        out += [f"B_{a}" for a in self.generic]
        out += [f"B_{a}_{alt}" for a, alts in self.specific.items() for alt in alts]
        return tuple(out)

    @property
    def n_params(self) -> int:
        return len(self.names)

    def design_row(self, alt_id: str, attributes: np.ndarray, attribute_names: Sequence[str]) -> np.ndarray:
        index = {n: i for i, n in enumerate(attribute_names)}
        row = np.zeros(self.n_params)
        k = 0
        for a in self.asc:
            row[k] = 1.0 if alt_id == a else 0.0
            k += 1
        for a in self.generic:
            row[k] = attributes[_attr_index(index, a)]
            k += 1
        for a, alts in self.specific.items():
            for alt in alts:
                if alt == alt_id:
                    row[k] = attributes[_attr_index(index, a)]
                k += 1
        return row

    def to_dict(self) -> dict:
        return {
            "type": "linear",
            "asc": list(self.asc),
            "generic": list(self.generic),
            "specific": {a: list(v) for a, v in self.specific.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinearUtilitySpec":
        return cls(tuple(d.get("asc", ())), tuple(d.get("generic", ())), dict(d.get("specific", {})))


def _attr_index(index: Mapping[str, int], name: str) -> int:
    try:
        return index[name]
    except KeyError:
        raise DataError(f"attribute {name!r} not present in the panel") from None


def utility_spec_from_dict(d: Mapping) -> LinearUtilitySpec | CountUtilitySpec:
    kind = d.get("type", "linear")
    if kind not in ("linear", "count"):
        raise ConfigError(f"unknown utility type {kind!r}")
    try:
        return LinearUtilitySpec.from_dict(d) if kind == "linear" else CountUtilitySpec.from_dict(d)
    except KeyError as exc:
        raise ConfigError(f"{kind} utility specification lacks key {exc}") from None


@dataclass(frozen=True)
class UtilityDesign:
    """Stacked design for all scenarios of all persons.

    Attributes
    ----------
    X : ndarray, shape (n_obs, J, P)
    available : ndarray of bool, shape (n_obs, J)
    chosen : ndarray of int, shape (n_obs,)
        Column index of the chosen alternative.
    person : ndarray of int, shape (n_obs,)
        Person index in ``0..n_persons-1`` of each scenario.
    """

    X: np.ndarray
    available: np.ndarray
    chosen: np.ndarray
    person: np.ndarray
    n_persons: int
    names: tuple[str, ...]
    alt_ids: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 3:
            raise ShapeError("X must have shape (n_obs, J, P)")
        n, J, P = X.shape
        avail = np.asarray(self.available, dtype=bool)
        if avail.shape != (n, J):
            raise ShapeError(f"availability mask shape {avail.shape} does not match {(n, J)}")
        if P != len(self.names):
            raise ShapeError(f"{P} design columns but {len(self.names)} names")
        chosen = np.asarray(self.chosen, dtype=int)
        person = np.asarray(self.person, dtype=int)
        if chosen.shape != (n,) or person.shape != (n,):
            raise ShapeError("chosen and person must have one entry per scenario")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "available", avail)
        object.__setattr__(self, "chosen", chosen)
        object.__setattr__(self, "person", person)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "alt_ids", tuple(self.alt_ids))

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_alternatives(self) -> int:
        return self.X.shape[1]

    @property
    def n_params(self) -> int:
        return self.X.shape[2]

    def subset(self, persons: Sequence[int]) -> "UtilityDesign":
        """Restrict to the given persons, renumbered in the order given."""
        persons = np.asarray(persons, dtype=int)
        remap = np.full(self.n_persons, -1)
        remap[persons] = np.arange(len(persons))
        rows = np.flatnonzero(remap[self.person] >= 0)
        # keep scenarios grouped in the new person order
        rows = rows[np.argsort(remap[self.person[rows]], kind="stable")]
        return UtilityDesign(
            self.X[rows],
            self.available[rows],
            self.chosen[rows],
            remap[self.person[rows]],
            len(persons),
            self.names,
            self.alt_ids,
        )

    def duplicate(self, times: int = 2) -> "UtilityDesign":
        """Stack ``times`` copies with distinct person indices."""
        reps = np.arange(times)
        person = (self.person[None, :] + self.n_persons * reps[:, None]).ravel()
        return UtilityDesign(
            np.tile(self.X, (times, 1, 1)),
            np.tile(self.available, (times, 1)),
            np.tile(self.chosen, times),
            person,
            self.n_persons * times,
            self.names,
            self.alt_ids,
        )


def build_design(
    panel: ChoicePanel, spec: LinearUtilitySpec | CountUtilitySpec, alt_ids: Sequence[str] | None = None
) -> UtilityDesign:
    """Lay out a panel's scenarios against a utility specification.

    Parameters
    ----------
    alt_ids : sequence of str, optional
        Column order for alternatives. Defaults to the panel's order of
        first appearance, or the lexicographic composition order for a
        count specification. Pass the training order when building a
        design for held-out data.
    """
    if isinstance(spec, CountUtilitySpec):
        comps = {}
        if alt_ids is None:
            alt_ids = ["-".join(map(str, c)) for c in spec.choice_set.alternatives]
        canon = {}
        for a in alt_ids:
            canon[spec.composition_for(a)] = a
        for a in panel.alt_ids:
            comps[a] = spec.composition_for(a)
            if comps[a] not in canon:
                raise DataError(f"alternative {a!r} not in the design's alternative set")
        col_of = {a: alt_ids.index(canon[comps[a]]) for a in panel.alt_ids}
    else:
        if alt_ids is None:
            alt_ids = panel.alt_ids
        alt_ids = [str(a) for a in alt_ids]
        missing = [a for a in panel.alt_ids if a not in alt_ids]
        if missing:
            raise DataError(f"alternatives {missing} not in the design's alternative set")
        col_of = {a: alt_ids.index(a) for a in panel.alt_ids}

    J = len(alt_ids)
    names = spec.names
    n_obs = panel.n_scenarios
    X = np.zeros((n_obs, J, len(names)))
    avail = np.zeros((n_obs, J), dtype=bool)
    chosen = np.zeros(n_obs, dtype=int)
    person = np.zeros(n_obs, dtype=int)
    attr_names = panel.attribute_names
    r = 0
    for n, rec in enumerate(panel.persons):
        for sc in rec.scenarios:
            for j, a in enumerate(sc.alt_ids):
                col = col_of[a]
                if isinstance(spec, CountUtilitySpec):
                    attrs = dict(zip(attr_names, sc.attributes[j]))
                    X[r, col] = build_count_design_row(spec, comps[a], attrs)
                else:
                    X[r, col] = spec.design_row(a, sc.attributes[j], attr_names)
                avail[r, col] = bool(sc.available[j])
            chosen[r] = col_of[sc.alt_ids[sc.chosen]]
            person[r] = n
            r += 1
    return UtilityDesign(X, avail, chosen, person, panel.n_persons, names, tuple(alt_ids))
