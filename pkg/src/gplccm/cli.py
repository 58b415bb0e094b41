"""Command-line interface.

Subcommands: ``estimate``, ``predict``, ``crossval``, ``explain``,
``simulate`` and ``compare``. Runs are driven by a JSON config whose
keys can be overridden by flags. Every random draw derives from
``--seed`` through numpy's ``SeedSequence`` and the PCG64 generator.

Config layout (paths relative to the config file)::

    {
      "data": {"choices": "choices.csv", "persons": "persons.csv",
               "schema": {"person_id": "person_id", ...}, "delimiter": ","},
      "model": {"kind": "gp-lccm", "n_classes": 2,
                "kernel": "matern(nu=2.5)", "restarts": 5, "tol": 1e-4,
                "max_iter": 500, "hyper_restarts": 3},
      "utility": {"type": "linear", "asc": [...], "generic": [...],
                  "specific": {"attr": ["alt", ...]}},
      "fixed": ["C_ST0"], "bounds": {"B_cost": [null, 0.0]},
      "features": {"continuous": ["age"], "binary": ["male"],
                   "categorical": {"grade": {"base": 1, "levels": [1, 2, 3]}}},
      "seed": 0, "folds": 5, "threads": 1
    }

Exit codes: 0 success, 2 config error, 3 data error, 4 estimation
error, 5 prediction error. Failures also write ``error.json`` to the
output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ChoicePanel, PanelSchema, PersonFeatures, load_features, load_panel, one_hot_encode
from .design import utility_spec_from_dict
from .errors import (
    AvailabilityError,
    ConfigError,
    DataError,
    GpLccmError,
    PredictionError,
    SchemaError,
)
from .evaluation import FitReport, comparison_table, kfold_cv
from .interpret import DEFAULT_SAMPLES, explain_instance
from .kernels import parse_kernel
from .lccm import FittedLccm
from .mnl import standard_errors
from .models import FittedModel, ModelSpec, fit_model, membership_matrix
from .serialize import model_from_dict, model_to_dict
from .simulate import recovery_config, simulate, write_simulation

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION, EXIT_PREDICTION = 0, 2, 3, 4, 5
DEFAULT_KERNEL = "matern(nu=2.5)"


# ---------------------------------------------------------------------------
# config


def load_config(path: str | Path | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg, p.resolve().parent


def parse_k(text: str | None) -> list[int] | None:
    """``"3"`` or an inclusive range ``"2-7"``."""
    if text is None:
        return None
    try:
        if "-" in text:
            a, b = (int(x) for x in text.split("-", 1))
            ks = list(range(a, b + 1))
        else:
            ks = [int(text)]
    except ValueError:
        raise ConfigError(f"--k expects an integer or a range like 2-7, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError(f"invalid class count {text!r}")
    return ks


def _schema(cfg: dict) -> PanelSchema:
    data = cfg.get("data", {})
    s = dict(data.get("schema", {}))
    if "attributes" in s and s["attributes"] is not None:
        s["attributes"] = tuple(s["attributes"])
    s.setdefault("delimiter", data.get("delimiter", ","))
    try:
        return PanelSchema(**s)
    except TypeError as exc:
        raise ConfigError(f"bad data schema: {exc}") from None


def _encoding(cfg: dict) -> dict:
    f = cfg.get("features", {})
    return {
        "continuous": list(f.get("continuous", [])),
        "binary": list(f.get("binary", [])),
        "categorical": {k: dict(v) for k, v in f.get("categorical", {}).items()},
        "person_id": cfg.get("data", {}).get("person_id", "person_id"),
    }


def membership_columns(encoding: dict) -> list[str]:
    """Feature names the membership model sees, dummies included."""
    names = list(encoding["continuous"]) + list(encoding["binary"])
    for col, opts in encoding["categorical"].items():
        if "levels" not in opts:
            raise ConfigError(f"levels of categorical feature {col!r} are unknown")
        base = opts.get("base", opts["levels"][0])
        names += [f"{col}={lv:g}" for lv in opts["levels"] if lv != base]
    return names


def encode_features(raw: PersonFeatures, encoding: dict) -> tuple[PersonFeatures, list[str]]:
    """One-hot encode categorical columns, filling in levels seen in the data."""
    f = raw
    for col, opts in encoding["categorical"].items():
        if opts.get("levels") is None:
            opts["levels"] = sorted(set(f.matrix[:, f.column_index(col)].tolist()))
        f = one_hot_encode(f, col, opts.get("base"), opts["levels"])
    return f, membership_columns(encoding)


def _read_features(path: Path | None, encoding: dict, delimiter: str) -> tuple[PersonFeatures | None, list[str]]:
    cols = encoding["continuous"] + encoding["binary"] + list(encoding["categorical"])
    if not cols:
        return None, []
    if path is None:
        raise ConfigError("membership features are configured but no persons file is given")
    raw = load_features(path, encoding["person_id"], cols, delimiter)
    return encode_features(raw, encoding)


def build_spec(cfg: dict, args: argparse.Namespace, n_classes: int | None = None) -> ModelSpec:
    m = cfg.get("model", {})
    kind = m.get("kind", "gp-lccm")
    K = int(n_classes if n_classes is not None else m.get("n_classes", 1 if kind == "mnl" else 2))
    if kind == "mnl" and K != 1:
        raise ConfigError("mnl models have exactly one class")
    kernel_text = getattr(args, "kernel", None) or m.get("kernel", DEFAULT_KERNEL)
    try:
        kernel = parse_kernel(kernel_text) if kind == "gp-lccm" else None
    except ValueError as exc:
        raise ConfigError(f"bad kernel expression {kernel_text!r}: {exc}") from None
    if "utility" not in cfg:
        raise ConfigError("config has no utility specification")
    feats = membership_columns(_encoding(cfg)) if kind != "mnl" else []
    enc = _encoding(cfg)
    restarts = getattr(args, "restarts", None)
    try:
        return ModelSpec(
            kind=kind,
            utility=utility_spec_from_dict(cfg["utility"]),
            n_classes=K,
            kernel=kernel,
            features=tuple(feats),
            continuous=tuple(enc["continuous"]) if kind != "mnl" else (),
            fixed=tuple(cfg.get("fixed", ())),
            bounds={k: tuple(v) for k, v in cfg.get("bounds", {}).items()},
            restarts=int(restarts if restarts is not None else m.get("restarts", 5)),
            tol=float(m.get("tol", 1e-4)),
            max_iter=int(m.get("max_iter", 500)),
            hyper_restarts=int(m.get("hyper_restarts", 3)),
            optimize_kernel=bool(m.get("optimize_kernel", True)),
            threads=int(getattr(args, "threads", None) or cfg.get("threads", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from None


def _load_inputs(cfg: dict, base: Path):
    data = cfg.get("data", {})
    if "choices" not in data:
        raise ConfigError("config has no data.choices path")
    schema = _schema(cfg)
    panel = load_panel(base / data["choices"], schema)
    enc = _encoding(cfg)
    persons = data.get("persons")
    features, names = _read_features(None if persons is None else base / persons, enc, schema.delimiter)
    return panel, features, names, schema, enc


def _categorical_levels_fixed(cfg: dict, enc: dict) -> dict:
    """Config with categorical levels made explicit after reading the data."""
    out = json.loads(json.dumps(cfg))
    out.setdefault("features", {})["categorical"] = enc["categorical"]
    return out


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "NA"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) if not isinstance(x, str) else x for x in r])


def parameter_rows(fitted: FittedModel, ses) -> list:
    rows = []
    for k, (b, (se, pv)) in enumerate(zip(fitted.betas, ses)):
        for i, name in enumerate(b.names):
            rows.append([str(k), name, float(b.beta[i]), float(se[i]), float(pv[i])])
    if isinstance(fitted.model, FittedLccm):
        g = fitted.model.membership
        for k in range(g.gamma.shape[0]):
            for name, v in zip(g.names, g.gamma[k]):
                rows.append([str(k), f"membership:{name}", float(v), np.nan, np.nan])
    return rows


def class_standard_errors(fitted: FittedModel, panel: ChoicePanel) -> list:
    design = fitted.design(panel)
    resp = fitted.model.responsibilities
    return [standard_errors(design, b, resp[:, k]) for k, b in enumerate(fitted.betas)]


# ---------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    cfg, base = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    ks = parse_k(args.k) or [None]
    panel, features, _, schema, enc = _load_inputs(cfg, base)
    cfg = _categorical_levels_fixed(cfg, enc)
    # runtimes vary between runs and go to timing.json only
    reports = []
    timing = {}
    for K in ks:
        spec = build_spec(cfg, args, K)
        fitted = fit_model(spec, panel, features, np.random.SeedSequence(seed))
        ses = class_standard_errors(fitted, panel)
        target = out if len(ks) == 1 else out / f"k{spec.n_classes}"
        target.mkdir(parents=True, exist_ok=True)
        artifact = model_to_dict(fitted, ses)
        artifact.pop("runtime", None)
        artifact["data"] = {"schema": cfg.get("data", {}).get("schema", {}), "delimiter": schema.delimiter}
        artifact["feature_encoding"] = enc
        (target / "model.json").write_text(json.dumps(artifact, indent=1))
        write_rows(target / "parameters.csv", ["class", "name", "estimate", "se", "p_value"], parameter_rows(fitted, ses))
        report = FitReport.from_model(fitted)
        timing[str(spec.n_classes)] = report.runtime
        report.runtime = None
        (target / "report.txt").write_text(report.to_text())
        reports.append(report)
    (out / "comparison.csv").write_text(comparison_table(reports))
    (out / "timing.json").write_text(json.dumps(timing, indent=1))
    return EXIT_OK


def _load_artifact(path) -> tuple[FittedModel, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"model artifact {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model artifact {path} is not valid JSON: {exc}") from None
    return model_from_dict(d), d


def _artifact_inputs(d: dict, choices: Path | None, persons: Path | None):
    cfg = {"data": d.get("data", {}), "features": {}}
    schema = _schema(cfg)
    enc = d.get("feature_encoding") or {"continuous": [], "binary": [], "categorical": {}, "person_id": "person_id"}
    panel = None if choices is None else load_panel(choices, schema)
    features, _ = _read_features(persons, enc, schema.delimiter) if persons is not None else (None, [])
    return panel, features


def cmd_predict(args) -> int:
    fitted, d = _load_artifact(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel, features = _artifact_inputs(d, Path(args.choices), None if args.persons is None else Path(args.persons))
    needed = _needed_attributes(fitted)
    missing = [a for a in needed if a not in panel.attribute_names] if panel.n_persons else []
    if missing:
        raise SchemaError(f"choices file lacks attribute column(s) {missing} used by the model")
    pred = fitted.predict(panel, features)
    K = fitted.n_classes
    write_rows(
        out / "class_probabilities.csv",
        ["person_id"] + [f"class_{k}" for k in range(K)],
        ([pid] + [float(x) for x in row] for pid, row in zip(panel.person_ids, pred.class_probabilities)),
    )
    alt = fitted.alt_ids
    rows, r = [], 0
    for rec, ll in zip(panel.persons, pred.person_loglik):
        for sc in rec.scenarios:
            for a in sc.alt_ids:
                j = alt.index(a) if a in alt else None
                rows.append([rec.person_id, sc.scenario_id, a, float(pred.choice_probabilities[r, j])])
            r += 1
    write_rows(out / "choice_probabilities.csv", ["person_id", "scenario_id", "alt_id", "probability"], rows)
    write_rows(
        out / "person_loglik.csv",
        ["person_id", "loglik"],
        ([pid, float(v)] for pid, v in zip(panel.person_ids, pred.person_loglik)),
    )
    (out / "summary.txt").write_text(f"n_persons: {panel.n_persons}\nloglik: {_fmt(pred.loglik)}\n")
    return EXIT_OK


def _needed_attributes(fitted: FittedModel) -> list[str]:
    u = fitted.spec.utility
    if hasattr(u, "attribute_columns"):
        return list(dict.fromkeys(u.attribute_columns))
    return list(dict.fromkeys(list(u.generic) + list(u.specific)))


def cmd_crossval(args) -> int:
    cfg, base = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    folds = args.folds if args.folds is not None else int(cfg.get("folds", 5))
    panel, features, _, _, enc = _load_inputs(cfg, base)
    cfg = _categorical_levels_fixed(cfg, enc)
    rows = []
    summary = []
    for K in parse_k(args.k) or [None]:
        spec = build_spec(cfg, args, K)
        cv = kfold_cv(spec, panel, features, folds, np.random.SeedSequence(seed), threads=spec.threads)
        for i, (f, ll) in enumerate(zip(cv.folds, cv.fold_loglik)):
            rows.append([spec.kind, str(spec.n_classes), str(i), str(len(f)), float(ll)])
        summary.append([spec.kind, str(spec.n_classes), cv.mean_fold_loglik, cv.mean_person_loglik])
    write_rows(out / "crossval.csv", ["kind", "n_classes", "fold", "n_persons", "loglik"], rows)
    write_rows(out / "crossval_summary.csv", ["kind", "n_classes", "mean_fold_loglik", "mean_person_loglik"], summary)
    return EXIT_OK


def cmd_explain(args) -> int:
    fitted, d = _load_artifact(args.model)
    if fitted.spec.kind == "mnl":
        raise ConfigError("explanations need a latent class model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [s for s in (args.ids or "").split(",") if s.strip()]
    if not ids:
        return EXIT_OK
    if args.persons is None:
        raise ConfigError("--persons is required to look up feature rows")
    _, features = _artifact_inputs(d, None, Path(args.persons))
    if features is None:
        raise ConfigError("the model uses no membership features")
    index = {pid: i for i, pid in enumerate(features.person_ids)}
    unknown = [p for p in ids if p not in index]
    if unknown:
        raise DataError(f"unknown person id(s) {unknown}")
    S = membership_matrix(fitted.spec, features, features.person_ids, fitted.standardization)[0]
    ss = np.random.SeedSequence(args.seed if args.seed is not None else 0)
    records = []
    for pid, child in zip(ids, ss.spawn(len(ids))):
        bars = []
        for k in range(fitted.n_classes):
            e = explain_instance(
                fitted,
                S,
                S[index[pid]],
                k,
                fitted.spec.features,
                n_samples=args.samples,
                width=args.width,
                seed=child,
            )
            records.append({"person_id": pid, **e.to_dict()})
            bars += e.bar_rows()
        write_rows(out / f"bars_{pid}.csv", ["feature", "weight", "class"], ([f, w, str(c)] for f, w, c in bars))
    (out / "explanations.json").write_text(json.dumps(records, indent=1))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.config is None:
        gen = recovery_config()
    else:
        gen, _ = load_config(args.config)
    seed = args.seed if args.seed is not None else int(gen.get("seed", 0))
    data = simulate(gen, np.random.SeedSequence(seed))
    write_simulation(data, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = []
    for p in args.reports:
        try:
            reports.append(FitReport.from_text(Path(p).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"report {p} not found") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"cannot parse report {p}: {exc}") from None
    text = comparison_table(reports)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "comparison.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gplccm", description="Latent class choice models with GP class membership.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int, help="seed for every random draw")
        sp.add_argument("--out", default=".", help="output directory")

    e = sub.add_parser("estimate", help="fit a model and write the artifact, parameter table and report")
    common(e)
    e.add_argument("--k", help="number of classes, or a range such as 2-7")
    e.add_argument("--kernel", help="kernel expression, e.g. 'constant(1.0) + matern(nu=2.5)'")
    e.add_argument("--restarts", type=int)
    e.add_argument("--threads", type=int)

    pr = sub.add_parser("predict", help="class and choice probabilities for new data")
    common(pr, config=False)
    pr.add_argument("--model", required=True)
    pr.add_argument("--choices", required=True)
    pr.add_argument("--persons")

    c = sub.add_parser("crossval", help="k-fold cross-validated predictive log likelihood")
    common(c)
    c.add_argument("--k")
    c.add_argument("--kernel")
    c.add_argument("--restarts", type=int)
    c.add_argument("--folds", type=int)
    c.add_argument("--threads", type=int)

    x = sub.add_parser("explain", help="local linear explanations of class membership")
    common(x, config=False)
    x.add_argument("--model", required=True)
    x.add_argument("--persons")
    x.add_argument("--ids", default="", help="comma-separated person ids")
    x.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    x.add_argument("--width", type=float)

    s = sub.add_parser("simulate", help="write a synthetic panel, persons file and truth")
    common(s)

    cp = sub.add_parser("compare", help="tabulate several report files")
    cp.add_argument("reports", nargs="+")
    cp.add_argument("--out")
    return p


COMMANDS = {
    "estimate": cmd_estimate,
    "predict": cmd_predict,
    "crossval": cmd_crossval,
    "explain": cmd_explain,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def exit_code(exc: BaseException, command: str) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, SchemaError, AvailabilityError)):
        return EXIT_DATA
    if isinstance(exc, PredictionError) or command == "predict":
        return EXIT_PREDICTION
    return EXIT_ESTIMATION


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (GpLccmError, ValueError, OSError) as exc:
        if isinstance(exc, OSError) and not isinstance(exc, FileNotFoundError):
            raise
        code = exit_code(exc, args.command)
        if isinstance(exc, FileNotFoundError):
            code = EXIT_DATA
        elif isinstance(exc, ValueError) and not isinstance(exc, GpLccmError):
            code = EXIT_CONFIG
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "command": args.command}
        sys.stderr.write(json.dumps(record) + "\n")
        out = getattr(args, "out", None)
        if out:
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
                (Path(out) / "error.json").write_text(json.dumps(record, indent=1))
            except OSError:
                pass
        return code


if __name__ == "__main__":
    sys.exit(main())
