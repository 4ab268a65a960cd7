import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from dosemeta.cli import main
from dosemeta.dataio import (DataFormatError, load_subjects, read_draws,
                             read_json, write_subjects)
from dosemeta.simulate import simulate
from conftest import small_scenario


FIT_FLAGS = ["--drugs", "drugA,drugB", "--covariates", "x1",
             "--knots", "0", "--chains", "2", "--warmup", "150",
             "--draws", "150", "--seed", "5"]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    data, truth = simulate(small_scenario(seed=31))
    write_subjects(out / "subjects.csv", data, covariate_names=["x1"])
    return out


@pytest.fixture(scope="module")
def fit_dir(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", "--data", str(sim_dir / "subjects.csv"),
                 "--out", str(out)] + FIT_FLAGS)
    assert code == 0
    return out


class TestSimulateCommand:
    def test_writes_expected_artifacts(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--out", str(out), "--seed", "3"]) == 0
        assert (out / "subjects.csv").exists()
        assert (out / "ground_truth.json").exists()
        manifest = read_json(out / "manifest.json")
        assert manifest["seed"] == 3
        assert "subjects.csv" in manifest["outputs"]

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--out", str(a), "--seed", "11"])
        main(["simulate", "--out", str(b), "--seed", "11"])
        assert filecmp.cmp(a / "subjects.csv", b / "subjects.csv", shallow=False)
        assert filecmp.cmp(a / "ground_truth.json", b / "ground_truth.json",
                           shallow=False)


class TestFitCommand:
    def test_singleton_knot_list(self, fit_dir):
        # single candidate: one-row comparison, trivially selected
        selection = read_json(fit_dir / "selection.json")
        assert selection["selected_knots"] == 0
        assert not selection["increase_observed"]
        rows = (fit_dir / "comparison.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + the single candidate
        assert rows[1].endswith(",1")  # marked selected

    def test_artifacts_complete(self, fit_dir):
        for name in ["draws_k0.csv", "draws_k0.json", "loo_k0.json",
                     "convergence_k0.json", "manifest.json"]:
            assert (fit_dir / name).exists(), name
        draws = read_draws(fit_dir, "k0")
        assert draws.n_chains == 2
        assert draws.meta["n_drugs"] == 2

    def test_malformed_row_reports_line_and_column(self, tmp_path, sim_dir):
        bad = tmp_path / "bad.csv"
        lines = (sim_dir / "subjects.csv").read_text().splitlines()
        lines[3] = lines[3].replace(",1,", ",maybe,", 1)
        bad.write_text("\n".join(lines) + "\n")
        code = main(["fit", "--data", str(bad), "--out", str(tmp_path / "o")] + FIT_FLAGS)
        assert code == 2

    def test_missing_file_is_io_error(self, tmp_path):
        code = main(["fit", "--data", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o")] + FIT_FLAGS)
        assert code == 4

    def test_invalid_knot_order_rejected(self, tmp_path, sim_dir):
        code = main(["fit", "--data", str(sim_dir / "subjects.csv"),
                     "--out", str(tmp_path / "o"), "--drugs", "drugA,drugB",
                     "--covariates", "x1", "--knots", "2,0"])
        assert code == 2

    def test_config_file_with_flag_override(self, tmp_path, sim_dir):
        config = {
            "data": str(sim_dir / "subjects.csv"),
            "drugs": ["drugA", "drugB"],
            "covariates": ["x1"],
            "knots": [0],
            "chains": 2,
            "warmup": 150,
            "draws": 150,
            "seed": 5,
            "out": str(tmp_path / "from_config"),
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        override = tmp_path / "override"
        code = main(["fit", "--config", str(config_path), "--out", str(override)])
        assert code == 0
        assert override.exists()
        assert not Path(config["out"]).exists()  # flag won

    def test_unknown_config_key_rejected(self, tmp_path, sim_dir):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"wat": 1}))
        code = main(["fit", "--config", str(config_path)])
        assert code == 2


class TestSummarizeCommand:
    def test_full_summary_artifacts(self, sim_dir, fit_dir):
        code = main(["summarize", "--data", str(sim_dir / "subjects.csv"),
                     "--out", str(fit_dir), "--dose-max", "6",
                     "--grid-points", "41"] + FIT_FLAGS)
        assert code == 0
        for name in ["risk_differences.csv", "prob_best.json", "ppc.json",
                     "curve_drugA_m0.csv", "curve_drugA_m0.svg",
                     "curve_drugB_m1.csv", "difference_drugA.csv",
                     "difference_drugA.svg", "summary_manifest.json"]:
            assert (fit_dir / name).exists(), name
        best = read_json(fit_dir / "prob_best.json")
        total = sum(best["probabilities"].values())
        assert total == pytest.approx(1.0, abs=1e-12)
        svg = (fit_dir / "curve_drugA_m0.svg").read_text()
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")

    def test_unconverged_fit_refused(self, tmp_path, sim_dir, fit_dir):
        out = tmp_path / "copy"
        out.mkdir()
        for f in fit_dir.iterdir():
            if f.name.startswith(("draws_k0", "selection", "convergence_k0")):
                (out / f.name).write_bytes(f.read_bytes())
        report = read_json(out / "convergence_k0.json")
        report["converged"] = False
        (out / "convergence_k0.json").write_text(json.dumps(report))
        code = main(["summarize", "--data", str(sim_dir / "subjects.csv"),
                     "--out", str(out)] + FIT_FLAGS)
        assert code == 3

    def test_missing_artifacts_is_io_error(self, tmp_path, sim_dir):
        code = main(["summarize", "--data", str(sim_dir / "subjects.csv"),
                     "--out", str(tmp_path / "empty")] + FIT_FLAGS)
        assert code == 4


class TestStandaloneCommands:
    def test_loo_command(self, sim_dir, fit_dir):
        code = main(["loo", "--data", str(sim_dir / "subjects.csv"),
                     "--out", str(fit_dir)] + FIT_FLAGS)
        assert code == 0

    def test_ppc_command(self, sim_dir, fit_dir):
        code = main(["ppc", "--data", str(sim_dir / "subjects.csv"),
                     "--out", str(fit_dir)] + FIT_FLAGS)
        assert code == 0
        report = read_json(fit_dir / "ppc.json")
        assert all(0 <= s["p_value"] <= 1 for s in report["statistics"])

    def test_curves_command(self, sim_dir, fit_dir):
        code = main(["curves", "--data", str(sim_dir / "subjects.csv"),
                     "--out", str(fit_dir), "--grid-points", "21"] + FIT_FLAGS)
        assert code == 0


class TestSubjectIo:
    def test_round_trip(self, tmp_path):
        data, _ = simulate(small_scenario(seed=17))
        path = tmp_path / "subjects.csv"
        write_subjects(path, data, covariate_names=["x1"])
        loaded, info = load_subjects(path, ["drugA", "drugB"], ["x1"])
        assert loaded.n_subjects == data.n_subjects
        assert loaded.n_trials == data.n_trials
        np.testing.assert_array_equal(loaded.outcome, data.outcome)
        np.testing.assert_allclose(loaded.doses, data.doses)
        # continuous covariate standardized on load
        assert abs(loaded.covariates[:, 0].mean()) < 1e-12
        assert "x1" in info.standardization

    def test_missing_dose_column_means_zero(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("trial_id,outcome,moderator,dose_a\n"
                        "t0,1,0,2.0\nt0,0,1,0.0\n")
        data, _ = load_subjects(path, ["a", "b"])
        np.testing.assert_array_equal(data.doses[:, 1], [0.0, 0.0])
        np.testing.assert_array_equal(data.doses[:, 0], [2.0, 0.0])

    def test_binary_covariates_not_standardized(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("trial_id,outcome,moderator,dose_a,cov_flag\n"
                        "t0,1,0,2.0,1\nt0,0,1,0.0,0\nt1,1,1,1.0,1\nt1,0,0,0.0,0\n")
        data, info = load_subjects(path, ["a"], ["flag"])
        assert set(np.unique(data.covariates)) == {0.0, 1.0}
        assert info.standardization == {}

    def test_malformed_errors_carry_context(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("trial_id,outcome,moderator,dose_a\nt0,1,0,oops\n")
        with pytest.raises(DataFormatError, match="line 2.*dose_a"):
            load_subjects(path, ["a"])
        path.write_text("trial_id,outcome,moderator,dose_a\nt0,3,0,1.0\n")
        with pytest.raises(DataFormatError, match="outcome"):
            load_subjects(path, ["a"])
