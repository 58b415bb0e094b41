import csv
import json

import numpy as np
import pytest

from gplccm.cli import main, parse_k
from gplccm.errors import ConfigError
from gplccm.evaluation import FitReport
from gplccm.simulate import recovery_config


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run_config(kind="gp-lccm", K=2):
    return {
        "data": {"choices": "sim/choices.csv", "persons": "sim/persons.csv"},
        "model": {"kind": kind, "n_classes": K, "kernel": "matern(nu=2.5)", "restarts": 1, "hyper_restarts": 1},
        "utility": {"type": "linear", "generic": ["x1", "x2"]},
        "features": {"continuous": ["s1", "s2"]},
        "seed": 3,
    }


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = write_json(root / "gen.json", recovery_config(40, 3))
    assert main(["simulate", "--config", gen, "--seed", "2", "--out", str(root / "sim")]) == 0
    cfg = write_json(root / "run.json", run_config())
    assert main(["estimate", "--config", cfg, "--out", str(root / "est")]) == 0
    return root


class TestSimulate:
    def test_files(self, work):
        assert {p.name for p in (work / "sim").iterdir()} == {"choices.csv", "persons.csv", "truth.json"}
        assert len(read_csv(work / "sim" / "persons.csv")) == 40

    def test_deterministic(self, work, tmp_path):
        gen = str(work / "gen.json")
        main(["simulate", "--config", gen, "--seed", "2", "--out", str(tmp_path)])
        for name in ("choices.csv", "persons.csv", "truth.json"):
            assert (tmp_path / name).read_bytes() == (work / "sim" / name).read_bytes()

    def test_bad_config(self, tmp_path):
        gen = write_json(tmp_path / "gen.json", {"n_persons": 3})
        assert main(["simulate", "--config", gen, "--out", str(tmp_path / "o")]) == 2
        assert json.loads((tmp_path / "o" / "error.json").read_text())["error"] == "ConfigError"


class TestEstimate:
    def test_outputs(self, work):
        est = work / "est"
        rows = read_csv(est / "parameters.csv")
        assert [r["name"] for r in rows] == ["B_x1", "B_x2", "B_x1", "B_x2"]
        assert all(float(r["se"]) > 0 for r in rows)
        report = FitReport.from_text((est / "report.txt").read_text())
        assert report.kind == "gp-lccm"
        assert report.n_observations == 120
        assert report.runtime is None
        assert "2" in json.loads((est / "timing.json").read_text())

    def test_bit_identical(self, work, tmp_path):
        main(["estimate", "--config", str(work / "run.json"), "--out", str(tmp_path)])
        for name in ("model.json", "parameters.csv", "report.txt", "comparison.csv"):
            assert (tmp_path / name).read_bytes() == (work / "est" / name).read_bytes()

    def test_trivial_mnl(self, tmp_path):
        lines = ["person_id,scenario_id,alt_id,chosen,x"]
        for n in range(6):
            for t in range(2):
                x = (n + t) % 3 - 1.0
                lines += [f"p{n},{t},a,{int(x > 0)},{x}", f"p{n},{t},b,{int(x <= 0)},0"]
        (tmp_path / "c.csv").write_text("\n".join(lines) + "\n")
        cfg = {
            "data": {"choices": "c.csv", "schema": {"available": None}},
            "model": {"kind": "mnl"},
            "utility": {"type": "linear", "specific": {"x": ["a"]}},
        }
        assert main(["estimate", "--config", write_json(tmp_path / "r.json", cfg), "--out", str(tmp_path / "o")]) == 0
        assert len(read_csv(tmp_path / "o" / "parameters.csv")) == 1
        report = FitReport.from_text((tmp_path / "o" / "report.txt").read_text())
        assert report.marginal_loglik >= 12 * np.log(0.5)

    def test_class_sweep(self, work, tmp_path):
        cfg = write_json(tmp_path / "run.json", {**run_config("lccm"), "data": {
            "choices": str(work / "sim" / "choices.csv"), "persons": str(work / "sim" / "persons.csv")}})
        assert main(["estimate", "--config", cfg, "--k", "1-3", "--out", str(tmp_path / "o")]) == 0
        rows = read_csv(tmp_path / "o" / "comparison.csv")
        assert [r["n_classes"] for r in rows] == ["1", "2", "3"]
        assert all((tmp_path / "o" / f"k{k}" / "model.json").exists() for k in (1, 2, 3))


class TestPredict:
    def test_training_loglik(self, work, tmp_path):
        sim = work / "sim"
        args = ["predict", "--model", str(work / "est" / "model.json"), "--choices", str(sim / "choices.csv")]
        assert main(args + ["--persons", str(sim / "persons.csv"), "--out", str(tmp_path)]) == 0
        report = FitReport.from_text((work / "est" / "report.txt").read_text())
        summary = dict(line.split(": ") for line in (tmp_path / "summary.txt").read_text().splitlines())
        assert float(summary["loglik"]) == pytest.approx(report.marginal_loglik, abs=1e-6)
        person = read_csv(tmp_path / "person_loglik.csv")
        assert sum(float(r["loglik"]) for r in person) == pytest.approx(float(summary["loglik"]), abs=1e-9)
        classes = read_csv(tmp_path / "class_probabilities.csv")
        assert all(abs(float(r["class_0"]) + float(r["class_1"]) - 1) < 1e-12 for r in classes)
        assert len(read_csv(tmp_path / "choice_probabilities.csv")) == 40 * 3 * 3

    def test_empty_input(self, work, tmp_path):
        (tmp_path / "c.csv").write_text("person_id,scenario_id,alt_id,available,chosen,x1,x2\n")
        args = ["predict", "--model", str(work / "est" / "model.json"), "--choices", str(tmp_path / "c.csv")]
        assert main(args + ["--persons", str(work / "sim" / "persons.csv"), "--out", str(tmp_path / "o")]) == 0
        assert "loglik: 0.0" in (tmp_path / "o" / "summary.txt").read_text()
        assert read_csv(tmp_path / "o" / "class_probabilities.csv") == []

    def test_missing_columns(self, work, tmp_path):
        rows = read_csv(work / "sim" / "choices.csv")
        with open(tmp_path / "c.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["person_id", "scenario_id", "alt_id", "available", "chosen", "x1"])
            w.writeheader()
            w.writerows({k: r[k] for k in w.fieldnames} for r in rows)
        args = ["predict", "--model", str(work / "est" / "model.json"), "--choices", str(tmp_path / "c.csv")]
        code = main(args + ["--persons", str(work / "sim" / "persons.csv"), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "x2" in json.loads((tmp_path / "o" / "error.json").read_text())["message"]


class TestCrossval:
    def test_rows(self, work, tmp_path):
        cfg = str(work / "run.json")
        assert main(["crossval", "--config", cfg, "--folds", "3", "--out", str(tmp_path)]) == 0
        folds = read_csv(tmp_path / "crossval.csv")
        assert sum(int(r["n_persons"]) for r in folds) == 40
        summary = read_csv(tmp_path / "crossval_summary.csv")[0]
        lls = [float(r["loglik"]) for r in folds]
        assert float(summary["mean_fold_loglik"]) == pytest.approx(np.mean(lls))
        assert float(summary["mean_person_loglik"]) == pytest.approx(np.sum(lls) / 40)

    def test_deterministic(self, work, tmp_path):
        cfg = str(work / "run.json")
        main(["crossval", "--config", cfg, "--folds", "3", "--out", str(tmp_path / "a")])
        main(["crossval", "--config", cfg, "--folds", "3", "--out", str(tmp_path / "b"), "--threads", "3"])
        assert (tmp_path / "a" / "crossval.csv").read_bytes() == (tmp_path / "b" / "crossval.csv").read_bytes()


class TestExplain:
    def args(self, work, out, ids):
        model = str(work / "est" / "model.json")
        persons = str(work / "sim" / "persons.csv")
        return ["explain", "--model", model, "--persons", persons, "--ids", ids, "--samples", "200", "--out", str(out)]

    def test_three_persons(self, work, tmp_path):
        assert main(self.args(work, tmp_path, "p00000,p00001,p00002")) == 0
        assert len(list(tmp_path.glob("bars_*.csv"))) == 3
        bars = read_csv(tmp_path / "bars_p00000.csv")
        assert [r["feature"] for r in bars] == ["s1", "s2", "s1", "s2"]
        assert len(json.loads((tmp_path / "explanations.json").read_text())) == 6

    def test_reproducible(self, work, tmp_path):
        main(self.args(work, tmp_path / "a", "p00004"))
        main(self.args(work, tmp_path / "b", "p00004"))
        assert (tmp_path / "a" / "bars_p00004.csv").read_bytes() == (tmp_path / "b" / "bars_p00004.csv").read_bytes()

    def test_no_ids(self, work, tmp_path):
        assert main(self.args(work, tmp_path, "")) == 0
        assert list(tmp_path.iterdir()) == []

    def test_unknown_id(self, work, tmp_path):
        assert main(self.args(work, tmp_path, "nobody")) == 3


class TestCompareAndErrors:
    def test_compare(self, work, capsys):
        report = str(work / "est" / "report.txt")
        assert main(["compare", report, report]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3 and lines[1].startswith("gp-lccm,2,")

    def test_missing_config(self, tmp_path):
        assert main(["estimate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2

    def test_bad_kernel(self, work, tmp_path):
        args = ["estimate", "--config", str(work / "run.json"), "--kernel", "spline()", "--out", str(tmp_path)]
        assert main(args) == 2

    def test_missing_data(self, tmp_path):
        cfg = write_json(tmp_path / "r.json", {**run_config(), "data": {"choices": "absent.csv"}})
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == 3

    def test_estimation_failure(self, work, tmp_path):
        cfg = {**run_config(), "data": {"choices": str(work / "sim" / "choices.csv"),
                                        "persons": str(work / "sim" / "persons.csv")}}
        path = write_json(tmp_path / "r.json", cfg)
        assert main(["estimate", "--config", path, "--k", "50", "--out", str(tmp_path / "o")]) == 4

    def test_parse_k(self):
        assert parse_k("2-7") == [2, 3, 4, 5, 6, 7]
        assert parse_k("3") == [3]
        with pytest.raises(ConfigError):
            parse_k("two")
