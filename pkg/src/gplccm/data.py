"""Panel choice data, person-level features and count-frequency choice sets.

Choices are read in long format, one row per person x scenario x
alternative. Person characteristics live in a separate file keyed by
person id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, DegenerateFeatureError, ParseError, SchemaError, ShapeError

_TRUE = {"1", "true", "t", "yes", "y", "1.0"}
_FALSE = {"0", "false", "f", "no", "n", "0.0"}


@dataclass(frozen=True)
class Scenario:
    """One choice situation: the alternatives offered and the one picked."""

    scenario_id: str
    alt_ids: tuple[str, ...]
    available: np.ndarray
    chosen: int
    attributes: np.ndarray

    @property
    def n_alternatives(self) -> int:
        return len(self.alt_ids)


@dataclass(frozen=True)
class PersonRecord:
    person_id: str
    scenarios: tuple[Scenario, ...]

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)


@dataclass(frozen=True)
class ChoicePanel:
    """Validated panel of decision-makers and their choice scenarios."""

    persons: tuple[PersonRecord, ...]
    attribute_names: tuple[str, ...]

    def __post_init__(self):
        p = len(self.attribute_names)
        for person in self.persons:
            if not person.scenarios:
                raise DataError(f"person {person.person_id!r} has no scenarios")
            for sc in person.scenarios:
                where = f"person {person.person_id!r}, scenario {sc.scenario_id!r}"
                if sc.n_alternatives < 2:
                    raise DataError(f"{where}: fewer than 2 alternatives")
                if sc.attributes.shape != (sc.n_alternatives, p):
                    raise DataError(f"{where}: attribute block has shape {sc.attributes.shape}")
                if not 0 <= sc.chosen < sc.n_alternatives:
                    raise DataError(f"{where}: chosen index out of range")
                if not sc.available[sc.chosen]:
                    raise DataError(f"{where}: chosen alternative is unavailable")

    @property
    def person_ids(self) -> tuple[str, ...]:
        return tuple(p.person_id for p in self.persons)

    @property
    def n_persons(self) -> int:
        return len(self.persons)

    @property
    def n_scenarios(self) -> int:
        return sum(p.n_scenarios for p in self.persons)

    @property
    def alt_ids(self) -> tuple[str, ...]:
        """Union of alternative ids in order of first appearance."""
        seen: dict[str, None] = {}
        for person in self.persons:
            for sc in person.scenarios:
                for a in sc.alt_ids:
                    seen.setdefault(a, None)
        return tuple(seen)

    def subset(self, indices: Iterable[int]) -> "ChoicePanel":
        return ChoicePanel(tuple(self.persons[i] for i in indices), self.attribute_names)


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for the long-format choices file.

    ``attributes=None`` takes every column not named elsewhere, in file order.
    ``available=None`` means every listed alternative is available.
    """

    person_id: str = "person_id"
    scenario_id: str = "scenario_id"
    alt_id: str = "alt_id"
    chosen: str = "chosen"
    available: str | None = "available"
    attributes: tuple[str, ...] | None = None
    delimiter: str = ","


def _parse_flag(value: str, row_index: int, column: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ParseError(f"row {row_index}: column {column!r} is not a 0/1 flag: {value!r}")


def load_panel(path: str | Path, schema: PanelSchema | None = None) -> ChoicePanel:
    """Read a long-format choices file into a :class:`ChoicePanel`.

    Rows are grouped by (person, scenario) in order of first appearance.
    Row indices in error messages count data rows from 1, excluding the header.
    """
    schema = schema or PanelSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    index = {name: i for i, name in enumerate(header)}
    required = [schema.person_id, schema.scenario_id, schema.alt_id, schema.chosen]
    if schema.attributes is not None:
        required += list(schema.attributes)
    missing = [c for c in required if c not in index]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    avail_col = schema.available if schema.available in index else None

    if schema.attributes is None:
        taken = {schema.person_id, schema.scenario_id, schema.alt_id, schema.chosen, schema.available}
        attr_names = tuple(h for h in header if h not in taken)
    else:
        attr_names = tuple(schema.attributes)
    attr_idx = [index[a] for a in attr_names]

    grouped: dict[str, dict[str, list]] = {}
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r}: expected {len(header)} fields, found {len(row)}")
        pid = row[index[schema.person_id]].strip()
        sid = row[index[schema.scenario_id]].strip()
        aid = row[index[schema.alt_id]].strip()
        chosen = _parse_flag(row[index[schema.chosen]], r, schema.chosen)
        avail = True if avail_col is None else _parse_flag(row[index[avail_col]], r, avail_col)
        try:
            attrs = [float(row[i]) for i in attr_idx]
        except ValueError:
            bad = next(attr_names[k] for k, i in enumerate(attr_idx) if not _is_float(row[i]))
            raise ParseError(f"row {r}: non-numeric value in attribute column {bad!r}") from None
        grouped.setdefault(pid, {}).setdefault(sid, []).append((aid, avail, chosen, attrs))

    persons = []
    for pid, scenarios in grouped.items():
        records = []
        for sid, alts in scenarios.items():
            chosen_idx = [i for i, a in enumerate(alts) if a[2]]
            if len(chosen_idx) != 1:
                raise DataError(
                    f"person {pid!r}, scenario {sid!r}: expected exactly one chosen "
                    f"alternative, found {len(chosen_idx)}"
                )
            ids = tuple(a[0] for a in alts)
            if len(set(ids)) != len(ids):
                raise DataError(f"person {pid!r}, scenario {sid!r}: duplicate alternative ids")
            records.append(
                Scenario(
                    scenario_id=sid,
                    alt_ids=ids,
                    available=np.array([a[1] for a in alts], dtype=bool),
                    chosen=chosen_idx[0],
                    attributes=np.array([a[3] for a in alts], dtype=float).reshape(len(alts), len(attr_names)),
                )
            )
        persons.append(PersonRecord(pid, tuple(records)))
    return ChoicePanel(tuple(persons), attr_names)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_panel(panel: ChoicePanel, path: str | Path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["person_id", "scenario_id", "alt_id", "available", "chosen", *panel.attribute_names])
        for person in panel.persons:
            for sc in person.scenarios:
                for j, aid in enumerate(sc.alt_ids):
                    w.writerow(
                        [person.person_id, sc.scenario_id, aid, int(sc.available[j]), int(j == sc.chosen)]
                        + [repr(float(x)) for x in sc.attributes[j]]
                    )


# ---------------------------------------------------------------------------
# person features


@dataclass(frozen=True)
class Standardization:
    """Affine transform (x - mean) / std applied to named columns.

    ``ddof`` records the standard-deviation convention so the transform
    can be replayed exactly (0 = population).
    """

    columns: tuple[str, ...]
    means: np.ndarray
    stds: np.ndarray
    ddof: int = 0

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "means": [float(m) for m in self.means],
            "stds": [float(s) for s in self.stds],
            "ddof": self.ddof,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardization":
        return cls(tuple(d["columns"]), np.asarray(d["means"], float), np.asarray(d["stds"], float), int(d["ddof"]))


@dataclass(frozen=True)
class PersonFeatures:
    matrix: np.ndarray
    feature_names: tuple[str, ...]
    person_ids: tuple[str, ...] | None = None
    standardization: Standardization | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[1] != len(self.feature_names):
            raise ShapeError(f"feature matrix shape {m.shape} does not match {len(self.feature_names)} names")
        if self.person_ids is not None and len(self.person_ids) != m.shape[0]:
            raise ShapeError("person_ids length differs from feature row count")
        object.__setattr__(self, "matrix", m)

    @property
    def n_persons(self) -> int:
        return self.matrix.shape[0]

    def column_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature column {name!r}") from None

    def select(self, columns: Sequence[str]) -> "PersonFeatures":
        idx = [self.column_index(c) for c in columns]
        st = self.standardization
        if st is not None:
            keep = [i for i, c in enumerate(st.columns) if c in columns]
            st = Standardization(tuple(st.columns[i] for i in keep), st.means[keep], st.stds[keep], st.ddof)
        return PersonFeatures(self.matrix[:, idx], tuple(columns), self.person_ids, st)

    def subset(self, rows: Sequence[int]) -> "PersonFeatures":
        rows = list(rows)
        ids = None if self.person_ids is None else tuple(self.person_ids[i] for i in rows)
        return PersonFeatures(self.matrix[rows], self.feature_names, ids, self.standardization)

    def align(self, person_ids: Sequence[str]) -> "PersonFeatures":
        """Reorder rows to follow ``person_ids`` (e.g. a panel's person order)."""
        if self.person_ids is None:
            if len(person_ids) != self.n_persons:
                raise DataError("features carry no person ids and row count differs from the panel")
            return PersonFeatures(self.matrix, self.feature_names, tuple(person_ids), self.standardization)
        where = {pid: i for i, pid in enumerate(self.person_ids)}
        missing = [p for p in person_ids if p not in where]
        if missing:
            raise DataError(f"no feature row for person(s) {missing[:5]}")
        return self.subset([where[p] for p in person_ids])


def load_features(
    path: str | Path,
    person_id: str = "person_id",
    columns: Sequence[str] | None = None,
    delimiter: str = ",",
) -> PersonFeatures:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if person_id not in header:
        raise SchemaError(f"{path}: missing column(s) {[person_id]}")
    names = [h for h in header if h != person_id] if columns is None else list(columns)
    missing = [c for c in names if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    idx = [header.index(c) for c in names]
    pid_idx = header.index(person_id)
    mat = np.empty((len(rows), len(names)))
    for r, row in enumerate(rows, start=1):
        for k, i in enumerate(idx):
            try:
                mat[r - 1, k] = float(row[i])
            except (ValueError, IndexError):
                raise ParseError(f"row {r}: non-numeric value in feature column {names[k]!r}") from None
    ids = tuple(row[pid_idx].strip() for row in rows)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate person ids")
    return PersonFeatures(mat, tuple(names), ids)


def write_features(features: PersonFeatures, path: str | Path, delimiter: str = ",") -> None:
    ids = features.person_ids or tuple(str(i) for i in range(features.n_persons))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["person_id", *features.feature_names])
        for pid, row in zip(ids, features.matrix):
            w.writerow([pid] + [repr(float(x)) for x in row])


def standardize_features(
    features: PersonFeatures, continuous_columns: Iterable[str], ddof: int = 0
) -> PersonFeatures:
    """Rescale the named columns to zero mean and unit standard deviation.

    Population standard deviation by default. The fitted means and stds are
    kept on the result so held-out rows can be transformed identically with
    :func:`apply_standardization`.
    """
    columns = tuple(continuous_columns)
    idx = [features.column_index(c) for c in columns]
    sub = features.matrix[:, idx]
    means = sub.mean(axis=0)
    stds = sub.std(axis=0, ddof=ddof)
    for c, s in zip(columns, stds):
        if not s > 0:
            raise DegenerateFeatureError(f"feature column {c!r} has zero variance")
    st = Standardization(columns, means, stds, ddof)
    return apply_standardization(features, st)


def apply_standardization(features: PersonFeatures, standardization: Standardization) -> PersonFeatures:
    mat = features.matrix.copy()
    for c, m, s in zip(standardization.columns, standardization.means, standardization.stds):
        i = features.column_index(c)
        mat[:, i] = (mat[:, i] - m) / s
    return PersonFeatures(mat, features.feature_names, features.person_ids, standardization)


def one_hot_encode(
    features: PersonFeatures, column: str, base: float | None = None, levels: Sequence[float] | None = None
) -> PersonFeatures:
    """Replace a categorical column by 0/1 indicators, dropping the base level.

    Indicator columns are named ``"{column}={level:g}"`` and left unstandardized.
    """
    i = features.column_index(column)
    values = features.matrix[:, i]
    levels = sorted(set(values.tolist())) if levels is None else list(levels)
    if base is None:
        base = levels[0]
    if base not in levels:
        raise DataError(f"base level {base!r} not among levels of {column!r}")
    unknown = set(values.tolist()) - set(levels)
    if unknown:
        raise DataError(f"column {column!r} has undeclared levels {sorted(unknown)}")
    kept = [lv for lv in levels if lv != base]
    dummies = np.column_stack([(values == lv).astype(float) for lv in kept]) if kept else np.empty((len(values), 0))
    names = [f"{column}={lv:g}" for lv in kept]
    mat = np.hstack([features.matrix[:, :i], dummies, features.matrix[:, i + 1 :]])
    new_names = features.feature_names[:i] + tuple(names) + features.feature_names[i + 1 :]
    return PersonFeatures(mat, new_names, features.person_ids, features.standardization)


# ---------------------------------------------------------------------------
# count-frequency choice sets


@dataclass(frozen=True)
class CountChoiceSet:
    n_modes: int
    total_trips: int
    alternatives: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.alternatives)

    def index(self, composition: Sequence[int]) -> int:
        return self.alternatives.index(tuple(composition))


def _compositions(n_modes: int, total: int):
    if n_modes == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(n_modes - 1, total - first):
            yield (first, *rest)


def enumerate_count_alternatives(n_modes: int, total_trips: int) -> CountChoiceSet:
    """All ways to split ``total_trips`` among ``n_modes`` modes, lexicographically ordered."""
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    if total_trips < 0:
        raise ValueError("total_trips must be >= 0")
    return CountChoiceSet(n_modes, total_trips, tuple(_compositions(n_modes, total_trips)))


@dataclass(frozen=True)
class CountUtilitySpec:
    """Utility of a count composition: frequency constants plus count-scaled attributes.

    For composition ``(h, i, j, ...)`` the utility is the sum over modes of
    the constant ``C[mode, count]`` plus ``count * sum(beta[attr] * attr)``
    over that mode's attributes. Constants listed in ``fixed_constants``
    are held at zero and do not appear as parameters.
    """

    modes: tuple[str, ...]
    total_trips: int
    mode_attributes: Mapping[str, tuple[str, ...]]
    fixed_constants: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(
            self, "mode_attributes", {m: tuple(self.mode_attributes.get(m, ())) for m in self.modes}
        )
        object.__setattr__(self, "fixed_constants", frozenset((m, int(c)) for m, c in self.fixed_constants))
        for m, c in self.fixed_constants:
            if m not in self.modes or not 0 <= c <= self.total_trips:
                raise ValueError(f"fixed constant ({m}, {c}) outside the choice set")

    @property
    def choice_set(self) -> CountChoiceSet:
        return enumerate_count_alternatives(len(self.modes), self.total_trips)

    @property
    def constant_keys(self) -> tuple[tuple[str, int], ...]:
        return tuple(
            (m, c) for m in self.modes for c in range(self.total_trips + 1) if (m, c) not in self.fixed_constants
        )

    @property
    def attribute_columns(self) -> tuple[str, ...]:
        return tuple(a for m in self.modes for a in self.mode_attributes[m])

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f"C_{m}{c}" for m, c in self.constant_keys) + tuple(f"B_{a}" for a in self.attribute_columns)

    @property
    def n_params(self) -> int:
        return len(self.constant_keys) + len(self.attribute_columns)

    def composition_for(self, alt_id: str) -> tuple[int, ...]:
        """Map an alternative id to its composition.

        Accepts ``"h-i-j"`` strings or the integer position in the
        lexicographic enumeration.
        """
        s = str(alt_id).strip()
        if "-" in s:
            comp = tuple(int(x) for x in s.split("-"))
            if len(comp) != len(self.modes) or sum(comp) != self.total_trips or min(comp) < 0:
                raise DataError(f"alternative {alt_id!r} is not a composition of {self.total_trips}")
            return comp
        alts = self.choice_set.alternatives
        k = int(s)
        if not 0 <= k < len(alts):
            raise DataError(f"alternative index {alt_id!r} outside the choice set")
        return alts[k]

    def to_dict(self) -> dict:
        return {
            "type": "count",
            "modes": list(self.modes),
            "total_trips": self.total_trips,
            "mode_attributes": {m: list(v) for m, v in self.mode_attributes.items()},
            "fixed_constants": sorted([m, c] for m, c in self.fixed_constants),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CountUtilitySpec":
        return cls(
            tuple(d["modes"]),
            int(d["total_trips"]),
            {m: tuple(v) for m, v in d["mode_attributes"].items()},
            frozenset((m, int(c)) for m, c in d.get("fixed_constants", [])),
        )


def build_count_design_row(
    spec: CountUtilitySpec, composition: Sequence[int], scenario_attributes: Mapping[str, float]
) -> np.ndarray:
    comp = tuple(int(c) for c in composition)
    if len(comp) != len(spec.modes) or sum(comp) != spec.total_trips or min(comp, default=0) < 0:
        raise DataError(f"composition {comp} is not in the choice set")
    row = np.zeros(spec.n_params)
    for k, key in enumerate(spec.constant_keys):
        mode, count = key
        if comp[spec.modes.index(mode)] == count:
            row[k] = 1.0
    offset = len(spec.constant_keys)
    for mode, count in zip(spec.modes, comp):
        for a in spec.mode_attributes[mode]:
            if a not in scenario_attributes:
                raise DataError(f"attribute {a!r} missing for mode {mode!r}")
            row[offset] = count * float(scenario_attributes[a])
            offset += 1
    return row

