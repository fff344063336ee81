"""Command-line surface: exit codes, documents, determinism."""

import json

import numpy as np
import pytest

import randzest as rz
from randzest.cli import main


def write_count_csv(path, seed=71, n=80):
    gen = rz.make_rng(seed)
    x = gen.standard_normal((n, 2))
    y1 = gen.poisson(np.exp(1.2 + 0.3 * x[:, 0])).astype(float) + 1
    y0 = gen.poisson(np.exp(0.8 - 0.2 * x[:, 1])).astype(float) + 1
    d = rz.observe(rz.PotentialTable(y1, y0, x), rz.draw_assignment(gen, n, n // 2))
    rows = ["z,y,x1,x2"]
    for i in range(n):
        rows.append(f"{d.z[i]},{d.y[i]},{d.x[i, 0]},{d.x[i, 1]}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return d


class TestEstimate:
    def test_model_assisted_document(self, tmp_path, capsys):
        csv_path = tmp_path / "d.csv"
        d = write_count_csv(csv_path)
        code = main([
            "estimate", "--input", str(csv_path), "--estimator", "ma",
            "--model", "poisson:interact", "--method", "squared-loss",
            "--g", "log", "--alpha", "0.05",
        ])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert set(doc) >= {"tau_hat", "se", "ci_low", "ci_high",
                            "estimator_kind", "g_scale"}
        assert doc["estimator_kind"] == "A"
        assert doc["g_scale"] == "log"

    def test_roundtrip_matches_in_process(self, tmp_path, capsys):
        csv_path = tmp_path / "d.csv"
        d = write_count_csv(csv_path)
        code = main([
            "estimate", "--input", str(csv_path), "--estimator", "ma",
            "--model", "poisson:interact", "--g", "log",
        ])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        spec = rz.MeanSpec(rz.poisson_family(), True, 2)
        fit = rz.fit_working_model(d, spec)
        h1, h0 = rz.mean_adjustment(spec)
        expected = rz.tau_model_assisted(d, h1, h0, fit.theta_hat, rz.LOG)
        assert doc["tau_hat"] == expected.tau_hat
        assert doc["se"] == expected.se()
        lo, hi = expected.ci(0.05)
        assert doc["ci_low"] == lo and doc["ci_high"] == hi

    def test_missing_column_is_data_error(self, tmp_path, capsys):
        csv_path = tmp_path / "bad.csv"
        csv_path.write_text("z,x1\n1,0.3\n0,0.4\n", encoding="utf-8")
        code = main(["estimate", "--input", str(csv_path), "--estimator", "unadjusted"])
        assert code == 2
        assert "'y'" in capsys.readouterr().err

    def test_missing_file_is_data_error(self, tmp_path):
        code = main([
            "estimate", "--input", str(tmp_path / "none.csv"),
            "--estimator", "unadjusted",
        ])
        assert code == 2

    def test_separable_fit_is_solver_error(self, tmp_path, capsys):
        gen = rz.make_rng(5)
        n = 40
        x = gen.uniform(-0.05, 0.05, size=n)
        y = (x > 0).astype(int)
        z = rz.draw_assignment(gen, n, 20).z
        rows = ["z,y,x1"] + [f"{z[i]},{y[i]},{x[i]}" for i in range(n)]
        csv_path = tmp_path / "sep.csv"
        csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        code = main([
            "estimate", "--input", str(csv_path), "--estimator", "i",
            "--model", "binomial:interact", "--g", "logit",
        ])
        assert code == 3
        assert "converge" in capsys.readouterr().err

    def test_ite_linear_document(self, tmp_path, capsys):
        csv_path = tmp_path / "d.csv"
        write_count_csv(csv_path)
        fitted_csv = tmp_path / "fitted.csv"
        code = main([
            "estimate", "--input", str(csv_path), "--estimator", "ite-linear",
            "--fitted-csv", str(fitted_csv),
        ])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert len(doc["theta"]) == 3
        assert len(doc["sigma"]) == 3
        lines = fitted_csv.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "unit,fitted_effect"
        assert len(lines) == 81

    def test_output_redirect(self, tmp_path):
        csv_path = tmp_path / "d.csv"
        write_count_csv(csv_path)
        out = tmp_path / "res.json"
        code = main([
            "estimate", "--input", str(csv_path), "--estimator", "unadjusted",
            "--g", "log", "--output", str(out),
        ])
        assert code == 0
        doc = json.loads(out.read_text(encoding="utf-8"))
        assert doc["estimator_kind"] == "unadjusted"

    def test_bad_alpha(self, tmp_path):
        csv_path = tmp_path / "d.csv"
        write_count_csv(csv_path)
        code = main([
            "estimate", "--input", str(csv_path), "--estimator", "unadjusted",
            "--alpha", "1.5",
        ])
        assert code == 2


class TestSimulate:
    def _scenario_file(self, tmp_path):
        doc = {
            "dgp": "null", "N": 50, "n1": 25, "seed": 9, "replications": 5,
            "g": "log",
            "estimators": [
                {"kind": "unadjusted"},
                {"kind": "ma", "family": "poisson", "interaction": True},
            ],
        }
        path = tmp_path / "s.scenario"
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path

    def test_deterministic_output_files(self, tmp_path):
        scenario = self._scenario_file(tmp_path)
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["simulate", "--scenario", str(scenario), "--output", str(out1)]) == 0
        assert main(["simulate", "--scenario", str(scenario), "--output", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        header = out1.read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("Model,Interaction,Estimation,Bias,SD,RMSE,ESE,Coverage")

    def test_bad_scenario_is_config_error(self, tmp_path, capsys):
        path = tmp_path / "broken.scenario"
        path.write_text("{not json", encoding="utf-8")
        assert main(["simulate", "--scenario", str(path)]) == 2


class TestEnumerate:
    def _pot_csv(self, tmp_path, y1, y0):
        rows = ["y1,y0"] + [f"{a},{b}" for a, b in zip(y1, y0)]
        path = tmp_path / "pot.csv"
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        return path

    def test_hand_computed_mean(self, tmp_path, capsys):
        path = self._pot_csv(tmp_path, [1, 2, 3, 4], [0, 1, 2, 3])
        code = main(["enumerate", "--input", str(path), "--n1", "2"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["n_assignments"] == 6
        assert doc["mean"] == pytest.approx(1.0, abs=1e-12)

    def test_constant_population_zero_variance(self, tmp_path, capsys):
        path = self._pot_csv(tmp_path, [3, 3, 3, 3], [3, 3, 3, 3])
        code = main(["enumerate", "--input", str(path), "--n1", "2"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["variance"] == 0.0

    def test_cap_exceeded_names_cap(self, tmp_path, capsys):
        y = list(range(30))
        path = self._pot_csv(tmp_path, y, y)
        code = main([
            "enumerate", "--input", str(path), "--n1", "15", "--cap", "1000",
        ])
        assert code == 2
        assert "1000" in capsys.readouterr().err
