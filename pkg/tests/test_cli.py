import json
import subprocess
import sys

import numpy as np
import pytest

from kandinsky import cli
from kandinsky.core import Dataset, classification, write_csv
from kandinsky.errors import InvariantError, SolverError

GROUPS = {"kind": "indicator", "groups": [{"name": "x0>0", "where": [{"col": "x0", "op": ">", "value": 0}]}]}


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("KANDINSKY_SEED", raising=False)
    (tmp_path / "spec.json").write_text(json.dumps(GROUPS))
    assert cli.main(["synth", "--k", "1", "--n-calib", "300", "--n-test", "40", "--seed", "7",
                     "--out-dir", "d", "--timestamp", "off"]) == 0
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def err_json(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("kandinsky: error ")
    return json.loads(line[len("kandinsky: error "):])


class TestCalibrate:
    def test_happy_path(self, work, capsys):
        assert run("calibrate", "--method", "kandinsky", "--alpha", 0.1, "--groups", "spec.json",
                   "--scores", "cqr", "d/calib.csv", "-o", "model.json") == 0
        diag = json.loads(capsys.readouterr().out)
        for key in ("objective", "interpolated_count", "max_subgradient_residual"):
            assert key in diag
        model = json.loads((work / "model.json").read_text())
        assert model["format"] == "kandinsky-model"
        assert model["config"]["effective"]["groups"] == "spec.json"

    def test_alpha_out_of_range(self, work, capsys):
        assert run("calibrate", "--alpha", 1.5, "d/calib.csv", "-o", "m.json") == 2
        assert err_json(capsys)["kind"] == "validation"

    def test_missing_csv(self, work, capsys):
        assert run("calibrate", "missing.csv", "-o", "m.json") == 1
        assert err_json(capsys)["code"] == 1

    def test_solver_and_invariant_codes(self, work, capsys, monkeypatch):
        def boom(exc):
            def f(*a, **k):
                raise exc
            return f
        monkeypatch.setattr(cli, "calibrate", boom(SolverError("no progress")))
        assert run("calibrate", "d/calib.csv", "-o", "m.json") == 3
        assert err_json(capsys) == {"code": 3, "kind": "solver", "message": "no progress"}
        monkeypatch.setattr(cli, "calibrate", boom(InvariantError("broken")))
        assert run("calibrate", "d/calib.csv", "-o", "m.json") == 4

    def test_config_file_and_override(self, work):
        (work / "c.json").write_text(json.dumps({"data": "d/calib.csv", "alpha": 0.2, "output": "m.json",
                                                 "scores": "cqr", "timestamp": "off"}))
        assert run("calibrate", "--config", "c.json") == 0
        assert json.loads((work / "m.json").read_text())["alpha"] == 0.2
        assert run("calibrate", "--config", "c.json", "--alpha", 0.05) == 0
        assert json.loads((work / "m.json").read_text())["alpha"] == 0.05

    def test_unknown_config_key(self, work):
        (work / "c.json").write_text(json.dumps({"colour": "red"}))
        assert run("calibrate", "--config", "c.json") == 2

    def test_seed_from_environment(self, work, monkeypatch):
        monkeypatch.setenv("KANDINSKY_SEED", "11")
        assert run("calibrate", "d/calib.csv", "-o", "m.json") == 0
        assert json.loads((work / "m.json").read_text())["seed"] == 11
        assert run("calibrate", "d/calib.csv", "-o", "m.json", "--seed", 2) == 0
        assert json.loads((work / "m.json").read_text())["seed"] == 2


def _class_files(work):
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(3), size=100)
    y = np.array([rng.choice(3, p=p) for p in P])
    write_csv(Dataset(rng.normal(size=(100, 1)), y, classification(3), base=P), work / "cc.csv")
    write_csv(Dataset(rng.normal(size=(3, 1)), [np.nan] * 3, classification(3), base=P[:3]), work / "ct.csv")


class TestPredict:
    def test_classification_three_rows(self, work):
        _class_files(work)
        assert run("calibrate", "cc.csv", "--task", "classification", "--n-classes", 3,
                   "--scores", "jittered(aps)", "-o", "m.json") == 0
        assert run("predict", "ct.csv", "--model", "m.json", "-o", "p.jsonl", "--timestamp", "off") == 0
        lines = (work / "p.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["format"] == "kandinsky-predictions"
        rows = [json.loads(x) for x in lines[1:]]
        assert len(rows) == 3 and all(isinstance(r["labels"], list) for r in rows)

    def test_testtime_regression_needs_grid(self, work, capsys):
        run("calibrate", "d/calib.csv", "--groups", "spec.json", "-o", "m.json")
        assert run("predict", "d/test.csv", "--model", "m.json", "--method", "testtime",
                   "--calib", "d/calib.csv") == 2
        assert "grid" in err_json(capsys)["message"]

    def test_testtime_with_grid(self, work):
        run("calibrate", "d/calib.csv", "--groups", "spec.json", "-o", "m.json")
        assert run("predict", "d/test.csv", "--model", "m.json", "--method", "testtime",
                   "--calib", "d/calib.csv", "--grid=-6:6:24", "-o", "p.jsonl") == 0
        rows = (work / "p.jsonl").read_text().splitlines()[1:]
        assert len(json.loads(rows[0])["grid_mask"]) == 24

    def test_same_seed_identical_bytes(self, work):
        run("calibrate", "d/calib.csv", "--groups", "spec.json", "-o", "m.json")
        outs = []
        for _ in range(2):
            assert run("predict", "d/test.csv", "--model", "m.json", "--seed", 3, "-o", "p.jsonl",
                       "--timestamp", "off") == 0
            outs.append((work / "p.jsonl").read_bytes())
        assert outs[0] == outs[1]

    def test_score_mismatch(self, work):
        _class_files(work)
        run("calibrate", "d/calib.csv", "-o", "m.json")
        assert run("predict", "ct.csv", "--model", "m.json") == 2


class TestEvaluate:
    def test_perfect_coverage(self, work):
        rows = [{"format": "kandinsky-predictions", "alpha": 0.1, "task": {"kind": "regression"}, "grid": None}]
        rows += [{"row": i, "intervals": [[-1e9, 1e9]], "size": 2e9} for i in range(40)]
        (work / "p.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        (work / "g.json").write_text(json.dumps([{"name": "a", "where": [{"col": "x0", "op": ">", "value": 0}]},
                                                {"name": "b", "where": []}]))
        assert run("evaluate", "d/test.csv", "--predictions", "p.jsonl", "--groups", "g.json",
                   "-o", "r.json", "--tsv", "r.tsv") == 0
        rep = json.loads((work / "r.json").read_text())["report"]
        assert rep["cd"] == 0.1
        assert all(v["miscoverage"] == 0 for v in rep["per_group"].values())
        assert (work / "r.tsv").read_text().startswith("# group")

    def test_row_count_mismatch(self, work):
        (work / "p.jsonl").write_text(json.dumps({"format": "kandinsky-predictions", "alpha": 0.1,
                                                  "task": {"kind": "regression"}}) + "\n")
        assert run("evaluate", "d/test.csv", "--predictions", "p.jsonl") == 2

    def test_not_predictions(self, work):
        (work / "p.jsonl").write_text("{}\n")
        assert run("evaluate", "d/test.csv", "--predictions", "p.jsonl") == 1


class TestSynthAndExperiment:
    def test_synth_seed_determinism(self, work):
        run("synth", "--k", "1", "--n-calib", "300", "--n-test", "40", "--seed", "7", "--out-dir", "e",
            "--timestamp", "off")
        for f in ("calib.csv", "test.csv"):
            assert (work / "d" / f).read_bytes() == (work / "e" / f).read_bytes()
        meta = [json.loads((work / d / "synth.json").read_text()) for d in ("d", "e")]
        assert meta[0]["synth"] == meta[1]["synth"]

    def test_experiment_outputs(self, work):
        exp = {"data": {"source": "synth", "k": 1, "n_calib": 100, "n_test": 100},
               "methods": [{"name": "split", "method": "split"}], "trials": 2}
        (work / "exp.json").write_text(json.dumps(exp))
        assert run("experiment", "exp.json", "-o", "r.json", "--csv", "r.csv", "--trials", 3,
                   "--timestamp", "off") == 0
        rep = json.loads((work / "r.json").read_text())
        assert rep["config"]["trials"] == 3 and "timestamp" not in rep
        assert (work / "r.csv").exists()

    def test_experiment_timestamp_on(self, work):
        exp = {"data": {"source": "synth", "k": 1, "n_calib": 50, "n_test": 50},
               "methods": [{"name": "split", "method": "split"}]}
        (work / "exp.json").write_text(json.dumps(exp))
        assert run("experiment", "exp.json", "-o", "r.json") == 0
        assert "timestamp" in json.loads((work / "r.json").read_text())


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "kandinsky", "calibrate", str(tmp_path / "x.csv"),
                          "-o", str(tmp_path / "m.json")], capture_output=True, text=True)
    assert out.returncode == 1
    assert json.loads(out.stderr.split("kandinsky: error ", 1)[1])["kind"] == "parse"


def test_default_target_miscoverage(work):
    # the target level used throughout the reference experiments
    assert run("calibrate", "d/calib.csv", "-o", "m.json") == 0
    assert json.loads((work / "m.json").read_text())["alpha"] == 0.1
    from kandinsky.eval.experiment import normalize_config
    assert normalize_config({"data": {"source": "synth"}, "methods": [{"method": "split"}]})["alpha"] == 0.1
