import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from plmfusion.cli import main
from plmfusion.evidence import SummaryEvidence, solve_internal_theta
from plmfusion.io import write_dataset, write_evidence
from plmfusion.simulation import generate_case, working_model_for


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_dataset(root / "internal.csv", generate_case("II", 200, np.random.default_rng(1)))
    ext = generate_case("II", 1000, np.random.default_rng(2))
    model = working_model_for("II")
    theta, V = solve_internal_theta(ext, model)
    write_evidence(root / "ev.json", SummaryEvidence(theta=theta, model=model, vcov=V, n_external=1000))
    obj = json.loads((root / "ev.json").read_text())
    del obj["vcov"]
    (root / "novcov.json").write_text(json.dumps(obj))
    far = dict(obj, theta=[50.0] * len(obj["theta"]), is_truth=True)
    (root / "far.json").write_text(json.dumps(far))
    return root


def fit_args(files, *extra):
    return ["fit", "--data", str(files / "internal.csv"), "--outcome", "y", "--nonlinear", "z", *extra]


class TestFitCommand:
    def test_ib2_success(self, files, capsys):
        out = files / "fit.json"
        rc = main(fit_args(files, "--summary", str(files / "ev.json"), "--estimator", "ib2", "--bandwidth", "s=1", "--out", str(out)))
        assert rc == 0
        text = capsys.readouterr().out
        assert "x1" in text and "estimator: ib2" in text
        report = json.loads(out.read_text())
        assert report["estimator"] == "ib2" and len(report["coefficients"]) == 4

    def test_six_significant_digits(self, files, capsys):
        main(fit_args(files, "--bandwidth", "s=1"))
        line = [l for l in capsys.readouterr().out.splitlines() if l.strip().startswith("x1")][0]
        estimate = line.split()[1]
        assert len(estimate.replace("-", "").replace(".", "").lstrip("0")) <= 6

    def test_missing_vcov_exit_2(self, files, capsys):
        rc = main(fit_args(files, "--summary", str(files / "novcov.json"), "--estimator", "ib2"))
        assert rc == 2
        assert "vcov" in capsys.readouterr().err

    def test_infeasible_exit_3(self, files, capsys):
        rc = main(fit_args(files, "--summary", str(files / "far.json"), "--estimator", "ib1", "--bandwidth", "s=1"))
        assert rc == 3
        assert "incompatible" in capsys.readouterr().err

    def test_missing_file_exit_2(self, files):
        assert main(["fit", "--data", str(files / "nope.csv"), "--outcome", "y", "--nonlinear", "z"]) == 2

    def test_bad_bandwidth_exit_2(self, files):
        assert main(fit_args(files, "--bandwidth", "s=-2")) == 2

    def test_deterministic_output(self, files):
        a, b = files / "a.json", files / "b.json"
        for path in (a, b):
            main(fit_args(files, "--summary", str(files / "ev.json"), "--estimator", "ib2", "--out", str(path)))
        assert a.read_bytes() == b.read_bytes()


class TestCurveCommand:
    def test_grid_100(self, files):
        fit = files / "fit_curve.json"
        assert main(fit_args(files, "--bandwidth", "s=1", "--out", str(fit))) == 0
        out = files / "curve.csv"
        assert main(["curve", "--fit", str(fit), "--grid", "100", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 100
        z = np.array([float(r["z"]) for r in rows])
        se = np.array([float(r["se"]) for r in rows])
        assert np.all(np.diff(z) > 0) and np.all(np.isfinite(se))

    def test_bad_report_exit_2(self, files):
        bad = files / "bad.json"
        bad.write_text("{}")
        assert main(["curve", "--fit", str(bad), "--grid", "10"]) == 2


class TestBandwidthCommand:
    def test_prints_cv_curve(self, files, capsys):
        out = files / "bw.json"
        rc = main(["bandwidth", "--data", str(files / "internal.csv"), "--outcome", "y", "--nonlinear", "z",
                   "--method", "cv", "--grid", "0.8", "1.0", "1.25", "--out", str(out)])
        assert rc == 0
        assert "selected" in capsys.readouterr().out
        payload = json.loads(out.read_text())
        assert payload["s_grid"] == [0.8, 1.0, 1.25] and payload["best"]["s"] in payload["s_grid"]


class TestSimulateCommand:
    def test_outputs(self, files, capsys):
        out, log = files / "m.csv", files / "log.csv"
        rc = main(["simulate", "--case", "II", "--n", "100", "--n-external", "300", "--runs", "5", "--seed", "1",
                   "--s", "1", "--curve-bandwidth", "fit", "--out", str(out), "--log", str(log)])
        assert rc == 0
        assert "ib2" in capsys.readouterr().out
        with open(out) as fh:
            assert {r["estimator"] for r in csv.DictReader(fh)} == {"pls", "ib1", "ib2"}

    def test_bad_n_external(self):
        assert main(["simulate", "--case", "II", "--n-external", "lots", "--runs", "2"]) == 2

    def test_case_one_requires_truth(self):
        assert main(["simulate", "--case", "I", "--n-external", "100", "--runs", "2"]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "plmfusion", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "simulate" in proc.stdout
