"""End-to-end checks of the command pipeline on a small synthetic dataset.

A module-scoped fixture builds two Mx files with a known trend structure,
runs ingest -> covariates -> fit -> forecast once, and the tests poke at
the artifacts, the exit codes, and the determinism guarantees.
"""

import json
import shutil

import numpy as np
import pandas as pd
import pytest
import yaml

from mortlme.cli import main
from mortlme.covariates import load_covariates
from mortlme.hmd import MortalityPanel

AGE_TOKENS = ("0-39", "40-79", "80-110")
BASE = {"0-39": -6.2, "40-79": -4.1, "80-110": -2.1}
SLOPE = {"0-39": 1.0, "40-79": 1.1, "80-110": 0.85}

FORECAST_INPUTS = ("train_used.csv", "model.json", "covariates.csv", "walks.json")


def write_mx_files(root):
    rng = np.random.default_rng(42)
    years = range(1990, 2013)
    k, level = {}, 0.0
    for t in years:
        level += -0.025 + 0.004 * rng.standard_normal()
        k[t] = level
    for country in ("AA", "BB"):
        lines = [f"{country}, Death rates (period 1x1)", "", "  Year  Age  Female  Male  Total"]
        for t in years:
            for token in AGE_TOKENS:
                vals = {}
                for gender in ("F", "M"):
                    a = BASE[token] + 0.25 * (gender == "M") + 0.12 * (country == "BB")
                    b = SLOPE[token] - 0.1 * (gender == "M")
                    vals[gender] = np.exp(a + b * k[t] + 0.01 * rng.standard_normal())
                total = 0.5 * (vals["F"] + vals["M"])
                lines.append(f"{t}  {token}  {vals['F']:.6f}  {vals['M']:.6f}  {total:.6f}")
        (root / f"{country}.txt").write_text("\n".join(lines) + "\n")


def config_dict():
    return {
        "data": {
            "root": ".",
            "files": {"AA": "AA.txt", "BB": "BB.txt"},
            "year_range": [1990, 2012],
            "train_cutoff": 2004,
            "age_grid": list(AGE_TOKENS),
        },
        "covariates": {"split_age": 40},
        "model": {
            "fixed": ["age", "kt"],
            "random": [{"group": "country:gender:age", "regressors": ["intercept", "kt"]}],
        },
        "cleaning": {"threshold": 0.3},
        "selection": {"criterion": "aic"},
        "forecast": {"horizon": 8, "level": 0.9, "n_sim": 300},
        "evaluate": {"scale": "log", "n_sim": 100},
        "lifetable": {"country": "AA", "gender": "F"},
        "valuation": {
            "country": "AA",
            "portfolio": "portfolio.csv",
            "portfolio_defaults": {"gender": "F", "annuity": 23700.0, "type": "both"},
            "valuation_year": 2005,
            "interest_rate": 0.01,
            "n_sim": 1000,
        },
        "out": "artifacts",
        "seed": 7,
    }


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    write_mx_files(root)
    (root / "portfolio.csv").write_text("year_of_birth,premium\n1955,6925\n1948,0\n")
    cfg = write_config(root / "run.yaml", config_dict())
    for command in ("ingest", "covariates", "fit", "forecast"):
        assert main([command, "--config", cfg]) == 0
    return root


def run_cfg(pipeline):
    return str(pipeline / "run.yaml")


def copy_artifacts(pipeline, names, dest):
    dest.mkdir(parents=True, exist_ok=True)
    for name in names:
        shutil.copy(pipeline / "artifacts" / name, dest / name)


class TestArtifacts:
    def test_ingest_panels(self, pipeline):
        arts = pipeline / "artifacts"
        panel = MortalityPanel.from_csv(arts / "panel.csv")
        train = MortalityPanel.from_csv(arts / "train.csv")
        test = MortalityPanel.from_csv(arts / "test.csv")
        assert panel.year_range == (1990, 2012)
        assert train.year_range == (1990, 2004)
        assert test.year_range == (2005, 2012)
        assert len(train) == 2 * 2 * 3 * 15
        assert train.countries == ["AA", "BB"]

    def test_covariate_artifacts_reload(self, pipeline):
        arts = pipeline / "artifacts"
        cov = load_covariates(arts / "covariates.csv", arts / "walks.json")
        assert set(cov.walks) == {
            ("global",),
            ("AA", "young"),
            ("AA", "old"),
            ("BB", "young"),
            ("BB", "old"),
        }
        assert sorted(cov.global_series.years) == list(range(1990, 2005))
        assert cov.walks[("global",)].drift < 0  # improving mortality

    def test_model_artifact(self, pipeline):
        payload = json.loads((pipeline / "artifacts" / "model.json").read_text())
        assert payload["method"] == "reml"
        assert payload["formula"]["fixed"] == ["age", "kt"]
        assert len(payload["theta"]) == 3  # lower triangle of a 2x2 factor
        assert payload["cleaning"]["retained_fraction"] == 1.0
        assert payload["summary"]["converged"] is True
        used = MortalityPanel.from_csv(pipeline / "artifacts" / "train_used.csv")
        assert len(used) == 180

    def test_forecast_artifact(self, pipeline):
        path = pipeline / "artifacts" / "forecast.csv"
        header = path.read_text().splitlines()[0]
        assert header == "country,gender,age_lower,year,point,lower,upper"
        frame = pd.read_csv(path)
        assert len(frame) == 4 * 3 * 8
        assert sorted(frame["year"].unique()) == list(range(2005, 2013))
        assert (frame["lower"] <= frame["point"]).all()
        assert (frame["point"] <= frame["upper"]).all()


class TestDeterminism:
    def test_forecast_reruns_byte_identical(self, pipeline, tmp_path):
        # only the four documented inputs are present, so this also shows
        # forecast consumes exactly what fit and covariates emitted
        out = tmp_path / "arts"
        copy_artifacts(pipeline, FORECAST_INPUTS, out)
        cfg = run_cfg(pipeline)
        assert main(["forecast", "--config", cfg, "--out", str(out)]) == 0
        first = (out / "forecast.csv").read_bytes()
        assert main(["forecast", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "forecast.csv").read_bytes() == first
        assert main(["forecast", "--config", cfg, "--out", str(out), "--seed", "99"]) == 0
        assert (out / "forecast.csv").read_bytes() != first

    def test_flag_overrides(self, pipeline, tmp_path):
        out = tmp_path / "arts"
        copy_artifacts(pipeline, FORECAST_INPUTS, out)
        cfg = run_cfg(pipeline)
        assert main(["forecast", "--config", cfg, "--out", str(out), "--horizon", "3", "--nsim", "50"]) == 0
        frame = pd.read_csv(out / "forecast.csv")
        assert sorted(frame["year"].unique()) == [2005, 2006, 2007]


class TestCommands:
    def test_populations_filter(self, pipeline, tmp_path):
        out = tmp_path / "arts"
        copy_artifacts(pipeline, FORECAST_INPUTS, out)
        cfg = run_cfg(pipeline)
        assert main(["forecast", "--config", cfg, "--out", str(out), "--populations", "AA"]) == 0
        frame = pd.read_csv(out / "forecast.csv")
        assert set(frame["country"]) == {"AA"} and set(frame["gender"]) == {"F", "M"}
        assert main(["forecast", "--config", cfg, "--out", str(out), "--populations", "BB/M"]) == 0
        frame = pd.read_csv(out / "forecast.csv")
        assert set(zip(frame["country"], frame["gender"])) == {("BB", "M")}
        assert main(["forecast", "--config", cfg, "--out", str(out), "--populations", "ZZ"]) == 2

    def test_select_trace(self, pipeline):
        cfg = run_cfg(pipeline)
        assert main(["select", "--config", cfg]) == 0
        trace = json.loads((pipeline / "artifacts" / "selection.json").read_text())
        assert trace["criterion"] == "aic"
        # both terms carry real signal here, so nothing should be dropped
        assert trace["steps"] == []
        assert trace["final_formula"]["fixed"] == ["age", "kt"]

    def test_evaluate_tables(self, pipeline, capsys):
        cfg = run_cfg(pipeline)
        assert main(["evaluate", "--config", cfg]) == 0
        arts = pipeline / "artifacts"
        table = pd.read_csv(arts / "mse.csv")
        assert list(table.columns) == ["country", "gender", "mse"]
        assert len(table) == 4 and (table["mse"] >= 0).all()
        for name in ("mse_lc.csv", "mse_ll.csv"):
            comparison = pd.read_csv(arts / name)
            assert list(comparison.columns) == ["country", "gender", "mse_model", "mse_benchmark", "ratio"]
            assert len(comparison) == 4
        out = capsys.readouterr().out
        assert "lc ratio" in out and "ll ratio" in out

    def test_lifetable_outputs(self, pipeline):
        cfg = run_cfg(pipeline)
        assert main(["lifetable", "--config", cfg]) == 0
        arts = pipeline / "artifacts"
        series = pd.read_csv(arts / "life_expectancy.csv")
        assert list(series.columns) == ["year", "point", "lower", "upper"]
        assert len(series) == 8
        assert (series["lower"] <= series["point"]).all()
        assert (series["point"] <= series["upper"]).all()
        table = pd.read_csv(arts / "lifetable.csv")
        assert list(table.columns) == ["age_lower", "m", "q", "l", "e"]
        assert list(table["age_lower"]) == [0, 40, 80]
        assert (np.diff(table["l"]) < 0).all()

    def test_value_outputs(self, pipeline):
        cfg = run_cfg(pipeline)
        assert main(["value", "--config", cfg]) == 0
        results = json.loads((pipeline / "artifacts" / "valuation.json").read_text())
        assert set(results) == {"bel", "scr", "n_sim", "seed", "percentile"}
        assert results["bel"] > 0
        assert results["scr"] >= 0
        assert results["n_sim"] == 1000 and results["seed"] == 7


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["fit", "--config", str(tmp_path / "nope.yaml")]) == 2
        assert "invalid config [config]" in capsys.readouterr().err

    def test_bad_yaml(self, tmp_path, capsys):
        path = tmp_path / "broken.yaml"
        path.write_text("data: [unclosed\n")
        assert main(["fit", "--config", str(path)]) == 2
        assert "not valid YAML" in capsys.readouterr().err

    def test_missing_key_names_it(self, pipeline, tmp_path, capsys):
        cfg = config_dict()
        del cfg["model"]
        path = write_config(tmp_path / "nomodel.yaml", cfg)
        assert main(["fit", "--config", path, "--out", str(tmp_path / "arts")]) == 2
        assert "model.fixed" in capsys.readouterr().err

    def test_missing_seed_for_simulation(self, pipeline, tmp_path, capsys):
        cfg = config_dict()
        del cfg["seed"]
        path = write_config(tmp_path / "noseed.yaml", cfg)
        assert main(["forecast", "--config", path, "--out", str(tmp_path / "arts")]) == 2
        assert "seed" in capsys.readouterr().err

    def test_missing_artifacts_are_data_errors(self, pipeline, tmp_path, capsys):
        cfg = run_cfg(pipeline)
        assert main(["covariates", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
        assert "missing artifact" in capsys.readouterr().err

    def test_unknown_benchmark(self, pipeline, tmp_path, capsys):
        out = tmp_path / "arts"
        copy_artifacts(pipeline, ("forecast.csv", "train.csv", "test.csv"), out)
        cfg = config_dict()
        cfg["evaluate"]["benchmarks"] = ["arima"]
        path = write_config(tmp_path / "badbench.yaml", cfg)
        assert main(["evaluate", "--config", path, "--out", str(out)]) == 2
        assert "evaluate.benchmarks" in capsys.readouterr().err

    def test_bad_type_is_reported(self, pipeline, tmp_path, capsys):
        cfg = config_dict()
        cfg["forecast"]["horizon"] = "nine"
        path = write_config(tmp_path / "badtype.yaml", cfg)
        assert main(["forecast", "--config", path, "--out", str(tmp_path / "arts")]) == 2
        assert "forecast.horizon" in capsys.readouterr().err


class TestEvaluateSemantics:
    def test_perfect_forecast_gives_zero_mse(self, pipeline, tmp_path):
        out = tmp_path / "arts"
        copy_artifacts(pipeline, ("train.csv", "test.csv"), out)
        test = pd.read_csv(out / "test.csv", float_precision="round_trip")
        frame = test.rename(columns={"log_rate": "point"})[
            ["country", "gender", "age_lower", "year", "point"]
        ]
        frame["lower"] = np.nan
        frame["upper"] = np.nan
        frame.to_csv(out / "forecast.csv", index=False)
        cfg = config_dict()
        cfg["evaluate"]["benchmarks"] = []
        path = write_config(tmp_path / "perfect.yaml", cfg)
        assert main(["evaluate", "--config", path, "--out", str(out)]) == 0
        table = pd.read_csv(out / "mse.csv")
        assert len(table) == 4
        assert (table["mse"] == 0.0).all()


class TestDataRoot:
    def test_env_var_locates_data(self, pipeline, tmp_path, monkeypatch):
        cfg = config_dict()
        del cfg["data"]["root"]
        path = write_config(tmp_path / "envroot.yaml", cfg)
        out = str(tmp_path / "arts")
        monkeypatch.delenv("MORTLME_DATA", raising=False)
        assert main(["ingest", "--config", path, "--out", out]) == 2
        monkeypatch.setenv("MORTLME_DATA", str(pipeline))
        assert main(["ingest", "--config", path, "--out", out]) == 0
