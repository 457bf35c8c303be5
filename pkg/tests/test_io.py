import json
import warnings

import numpy as np
import pytest

from plmfusion.errors import ValidationError
from plmfusion.evidence import SummaryEvidence, WorkingModel, solve_internal_theta
from plmfusion.io import FitReport, read_dataset, read_evidence, write_dataset, write_evidence
from plmfusion.simulation import generate_case, working_model_for
from plmfusion.workflow import curve_on_grid, fit_report, parse_bandwidth, resolve_bandwidth


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


class TestReadDataset:
    def test_three_columns(self, tmp_path):
        rows = "\n".join(f"{i * 0.3},{i / 40},{(-1) ** i * i}" for i in range(40))
        data = read_dataset(write_text(tmp_path / "d.csv", "y,z,x1\n" + rows + "\n"), "y", ["z"])
        assert (data.n, data.p, data.d) == (40, 1, 1)
        assert data.x_names == ("x1",) and data.z_names == ("z",)

    def test_na_row_named(self, tmp_path):
        lines = ["y,z,x1"] + [f"{i},{i / 40},{i % 3}" for i in range(40)]
        lines[7] = "6,NA,0"
        with pytest.raises(ValidationError, match=r"row\(s\) \[7\]"):
            read_dataset(write_text(tmp_path / "d.csv", "\n".join(lines)), "y", ["z"])

    def test_non_numeric(self, tmp_path):
        lines = ["y,z,x1"] + [f"{i},{i / 40},{i % 3}" for i in range(40)]
        lines[3] = "2,0.1,abc"
        with pytest.raises(ValidationError, match="row 3 column 'x1'"):
            read_dataset(write_text(tmp_path / "d.csv", "\n".join(lines)), "y", ["z"])

    def test_missing_column(self, tmp_path):
        with pytest.raises(ValidationError, match="missing column"):
            read_dataset(write_text(tmp_path / "d.csv", "y,z\n1,2\n"), "y", ["w"])

    def test_few_rows_warn(self, tmp_path):
        lines = ["y,z,x1"] + [f"{i},{i / 10},{(i * 7) % 5}" for i in range(10)]
        with pytest.warns(RuntimeWarning, match="only 10"):
            read_dataset(write_text(tmp_path / "d.csv", "\n".join(lines)), "y", ["z"])

    def test_working_only_columns_become_extra(self, tmp_path):
        lines = ["y,z,x1,w"] + [f"{i},{i / 40},{(i * 7) % 5},{i * i}" for i in range(40)]
        data = read_dataset(write_text(tmp_path / "d.csv", "\n".join(lines)), "y", ["z"], ["w"], linear=["x1"])
        assert data.x_names == ("x1",)
        np.testing.assert_array_equal(data.column("w"), np.arange(40.0) ** 2)

    def test_round_trip_bit_identical(self, tmp_path):
        data = generate_case("I", 200, np.random.default_rng(1))
        write_dataset(tmp_path / "d.csv", data)
        back = read_dataset(tmp_path / "d.csv", "y", ["z"])
        for f in ("y", "x", "z"):
            np.testing.assert_array_equal(getattr(back, f), getattr(data, f))
        assert back.x_names == data.x_names


class TestReadEvidence:
    def test_mean_truth(self, tmp_path):
        ev = read_evidence(write_json(tmp_path / "e.json", {"working_model": "mean", "theta": [2.0], "is_truth": True}))
        assert ev.is_truth and ev.model.kind == "mean" and ev.theta[0] == 2.0 and ev.vcov is None

    def test_vcov_shape_error(self, tmp_path):
        obj = {"working_model": "linear", "covariates": ["a", "b"], "theta": [1, 2], "vcov": [[1, 0, 0], [0, 1, 0]]}
        with pytest.raises(ValidationError, match="square"):
            read_evidence(write_json(tmp_path / "e.json", obj))

    def test_negative_eigenvalue_repaired(self, tmp_path):
        obj = {"working_model": "linear", "covariates": ["a", "b"], "theta": [1, 2], "vcov": [[1.0, 0.0], [0.0, -1e-6]]}
        with pytest.warns(RuntimeWarning, match="floored"):
            ev = read_evidence(write_json(tmp_path / "e.json", obj))
        assert np.linalg.eigvalsh(ev.vcov).min() > 0
        assert ev.repairs

    @pytest.mark.parametrize(
        "obj,msg",
        [
            ({"theta": [1.0]}, "working_model"),
            ({"working_model": "mean"}, "theta"),
            ({"working_model": "probit", "theta": [1.0]}, "working_model"),
            ({"working_model": "linear", "covariates": ["a"], "theta": [1.0, 2.0]}, "theta"),
            ({"working_model": "mean", "theta": [1.0], "n_external": -3}, "n_external"),
            ({"working_model": "mean", "theta": [1.0], "is_truth": "yes"}, "is_truth"),
            ({"working_model": "mean", "theta": ["1"]}, "theta"),
            ({"working_model": "mean", "theta": [1.0], "extra": 1}, "unknown"),
            ({"working_model": "linear", "theta": [1.0]}, "covariates"),
        ],
    )
    def test_schema_violations(self, tmp_path, obj, msg):
        with pytest.raises(ValidationError, match=msg):
            read_evidence(write_json(tmp_path / "e.json", obj))

    def test_invalid_json(self, tmp_path):
        with pytest.raises(ValidationError, match="JSON"):
            read_evidence(write_text(tmp_path / "e.json", "{not json"))

    def test_round_trip(self, tmp_path):
        ext = generate_case("II", 500, np.random.default_rng(0))
        model = working_model_for("II")
        theta, V = solve_internal_theta(ext, model)
        ev = SummaryEvidence(theta=theta, model=model, vcov=V, n_external=500)
        write_evidence(tmp_path / "e.json", ev)
        back = read_evidence(tmp_path / "e.json")
        np.testing.assert_array_equal(back.theta, ev.theta)
        np.testing.assert_array_equal(back.vcov, ev.vcov)
        assert back.model == ev.model and back.n_external == 500


@pytest.fixture(scope="module")
def ib2_report():
    data = generate_case("II", 200, np.random.default_rng(1))
    ext = generate_case("II", 1000, np.random.default_rng(2))
    model = working_model_for("II")
    theta, V = solve_internal_theta(ext, model)
    ev = SummaryEvidence(theta=theta, model=model, vcov=V, n_external=1000)
    return fit_report(data, "ib2", ev, "s=1", provenance={"data": "memory"})


class TestFitReport:
    def test_contents(self, ib2_report):
        r = ib2_report
        assert r.estimator == "ib2" and [c.name for c in r.coefficients] == ["x1", "x2", "x3", "o"]
        assert r.bandwidth.s == 1.0
        assert 0 < r.weights["min_p"] <= r.weights["max_p"]
        assert r.weights["rho"] == pytest.approx(1000 / 1200)
        assert len(r.curve["z"]) == 200 and np.all(np.diff(r.curve["z"]) >= 0)
        assert r.evidence["n_external"] == 1000

    def test_round_trip_lossless(self, ib2_report, tmp_path):
        ib2_report.write(tmp_path / "a.json")
        back = FitReport.read(tmp_path / "a.json")
        back.write(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert back.to_dict() == ib2_report.to_dict()

    def test_deterministic(self, ib2_report):
        data = generate_case("II", 200, np.random.default_rng(1))
        ext = generate_case("II", 1000, np.random.default_rng(2))
        model = working_model_for("II")
        theta, V = solve_internal_theta(ext, model)
        ev = SummaryEvidence(theta=theta, model=model, vcov=V, n_external=1000)
        again = fit_report(data, "ib2", ev, "s=1", provenance={"data": "memory"})
        assert again.to_json() == ib2_report.to_json()

    def test_non_positive_scalar_vcov_rejected(self):
        with pytest.raises(ValidationError, match="no positive eigenvalue"):
            SummaryEvidence(theta=[0.0], model=WorkingModel("mean"), vcov=[[-1e-6]], n_external=100)

    def test_repairs_listed(self):
        data = generate_case("II", 200, np.random.default_rng(1))
        model = WorkingModel("linear", ("x1", "x2"))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ev = SummaryEvidence(theta=[1.2, 1.4], model=model, vcov=[[0.01, 0.0], [0.0, -1e-6]], n_external=500)
        rep = fit_report(data, "ib2", ev, "s=1")
        assert any("floored" in w for w in rep.warnings)

    def test_ib1_with_estimated_evidence_warns(self, ib2_report):
        data = generate_case("II", 200, np.random.default_rng(1))
        ev_dict = ib2_report.evidence
        from plmfusion.io import evidence_from_dict

        rep = fit_report(data, "ib1", evidence_from_dict(ev_dict), "s=1")
        assert any("exact" in w for w in rep.warnings)

    def test_needs_evidence(self):
        data = generate_case("I", 100, np.random.default_rng(0))
        with pytest.raises(ValidationError, match="evidence"):
            fit_report(data, "ib1")

    def test_curve_grid(self, ib2_report):
        z, m, se = curve_on_grid(ib2_report, 100)
        assert z.size == 100 and np.all(np.diff(z) > 0)
        assert np.all(np.isfinite(se)) and np.all(se > 0)
        # the grid starts at the smallest sample point, where the stored curve is known
        assert z[0] == ib2_report.curve["z"][0]
        assert m[0] == pytest.approx(ib2_report.curve["m_hat"][0], abs=1e-12)


class TestBandwidthSpec:
    def test_parse(self):
        assert parse_bandwidth("auto") == "auto"
        assert parse_bandwidth("0.3") == 0.3
        assert parse_bandwidth("s=1.25") == ("s", 1.25)
        for bad in ("s=-1", "wide", "0"):
            with pytest.raises(ValidationError):
                parse_bandwidth(bad)

    def test_resolve(self):
        data = generate_case("I", 100, np.random.default_rng(0))
        assert resolve_bandwidth(data, "0.3").b == 0.3
        assert resolve_bandwidth(data, "s=1").b == pytest.approx(100 ** -0.2)
        assert resolve_bandwidth(data, "auto").s is not None
