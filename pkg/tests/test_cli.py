import csv

import numpy as np
import pytest

from semigcomp.cli import EXIT_INPUT, EXIT_NUMERICAL, main
from semigcomp.data import LongitudinalDataset, load_dataset, write_csv
from semigcomp.pipeline import AnalysisConfig, InputError, check_request, parse_estimators
from semigcomp.simulation import scenario_path


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--config", str(scenario_path(0.5)), "--n", "300", "--dataset-only",
                 "--out-dir", str(out), "--seed", "3"]) == 0
    return out / "dataset.csv"


@pytest.fixture(scope="module")
def analysis_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "analysis.ini"
    path.write_text(AnalysisConfig(R=500, per_time_intercepts=True, zero_indicator=True).to_text())
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestPipeline:
    def test_parse_estimators(self):
        assert parse_estimators("pp, gcomp-full") == ("pp", "gcomp-full")
        for bad in ("", "pp,pp", "gcomp"):
            with pytest.raises(InputError):
                parse_estimators(bad)

    def test_config_round_trip(self):
        cfg = AnalysisConfig(R=123, em_tol=1e-7, arm="x", missing_noncompliant=True)
        assert AnalysisConfig.from_text(cfg.to_text()) == cfg
        with pytest.raises(InputError):
            AnalysisConfig.from_text("[analysis]\nspeed = 3\n")

    def test_requests_checked_against_data(self, sim_csv):
        ds = load_dataset(sim_csv)
        no_c = LongitudinalDataset(ds.ids, ds.arm, ds.x, ds.y, ds.z, ds.b, ds.d)
        with pytest.raises(InputError, match="simulated"):
            check_request(no_c, ["gcomp-true"], AnalysisConfig())
        with pytest.raises(InputError, match="two arms"):
            check_request(ds, ["itt"], AnalysisConfig())


class TestAnalyze:
    def test_one_report_per_estimator(self, sim_csv, analysis_cfg, tmp_path):
        names = "pp,emreg,gcomp-parametric,gcomp-selfreport,gcomp-true,gcomp-full"
        code = main(["analyze", "--data", str(sim_csv), "--config", str(analysis_cfg), "--estimators", names,
                     "--out-dir", str(tmp_path)])
        assert code == 0
        rows = _rows(tmp_path / "estimates.csv")
        assert [r["estimator"] for r in rows] == names.split(",")
        assert all(np.isfinite(float(r["estimate"])) for r in rows)
        assert (tmp_path / "estimates.txt").read_text().startswith("Estimator")
        manifest = (tmp_path / "manifest.ini").read_text()
        assert "estimates.csv" in manifest and "seed = 20240601" in manifest

    def test_true_compliance_needs_simulated_data(self, sim_csv, tmp_path):
        text = sim_csv.read_text().splitlines()
        stripped = tmp_path / "no_c.csv"
        stripped.write_text("\n".join(",".join(line.split(",")[:-1]) for line in text) + "\n")
        assert main(["analyze", "--data", str(stripped), "--estimators", "gcomp-true",
                     "--out-dir", str(tmp_path)]) == EXIT_INPUT

    def test_itt_single_arm(self, sim_csv, tmp_path):
        assert main(["analyze", "--data", str(sim_csv), "--estimators", "itt",
                     "--out-dir", str(tmp_path)]) == EXIT_INPUT

    def test_missing_file_and_bad_estimator(self, tmp_path):
        assert main(["analyze", "--data", str(tmp_path / "nope.csv"), "--estimators", "pp",
                     "--out-dir", str(tmp_path)]) == EXIT_INPUT
        assert main(["analyze", "--data", str(tmp_path / "nope.csv"), "--estimators", "ols",
                     "--out-dir", str(tmp_path)]) == EXIT_INPUT

    def test_numerical_failure(self, tmp_path):
        y = np.zeros((3, 2))
        d = np.array([[np.nan, 1], [np.nan, 0], [np.nan, 0]])
        ds = LongitudinalDataset(["1", "2", "3"], np.full(3, "a"), np.zeros((3, 1)), y, np.zeros((3, 2, 1)),
                                 np.where(np.isnan(d), np.nan, 1.0), d)
        path = write_csv(ds, tmp_path / "tiny.csv")
        assert main(["analyze", "--data", str(path), "--estimators", "gcomp-full",
                     "--out-dir", str(tmp_path)]) == EXIT_NUMERICAL


class TestOtherCommands:
    def test_bootstrap_smoke(self, sim_csv, analysis_cfg, tmp_path):
        assert main(["bootstrap", "--data", str(sim_csv), "--config", str(analysis_cfg), "--estimators",
                     "gcomp-full", "--reps", "10", "--out-dir", str(tmp_path)]) == 0
        (row,) = _rows(tmp_path / "bootstrap.csv")
        assert row["B"] == "10" and float(row["ci_low"]) <= float(row["ci_high"])
        assert len(_rows(tmp_path / "replicates.csv")) == 10

    def test_simulate_metrics(self, tmp_path):
        assert main(["simulate", "--config", str(scenario_path(0.3)), "--n", "200", "--reps", "2",
                     "--mc-samples", "200", "--estimators", "pp,gcomp-selfreport,gcomp-true",
                     "--out-dir", str(tmp_path)]) == 0
        assert len(_rows(tmp_path / "metrics.csv")) == 3
        assert (tmp_path / "metrics.txt").read_text().splitlines()[1].split()[:2] == ["Estimator", "Bias"]

    def test_calibrate_infeasible_target(self, tmp_path):
        targets = tmp_path / "t.ini"
        targets.write_text("[targets]\nr2 = 0.3\nauc = 1.0\n")
        assert main(["calibrate", "--config", str(targets), "--out-dir", str(tmp_path)]) == EXIT_INPUT

    def test_rerun_is_byte_identical(self, sim_csv, analysis_cfg, tmp_path):
        outs = []
        for k, threads in enumerate(("1", "2")):
            d = tmp_path / f"run{k}"
            assert main(["bootstrap", "--data", str(sim_csv), "--config", str(analysis_cfg), "--estimators",
                         "pp,gcomp-selfreport", "--reps", "4", "--threads", threads, "--out-dir", str(d)]) == 0
            outs.append(((d / "bootstrap.csv").read_bytes(), (d / "replicates.csv").read_bytes()))
        assert outs[0] == outs[1]
