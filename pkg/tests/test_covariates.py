"""Covariate construction and random-walk estimation.

The published 1961-2010 trend series bundled with the package serve as
fixtures: refitting their random walks must reproduce the published
2011-2019 drift-path forecasts.
"""

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_panel, toy_grid

from mortlme import data_path
from mortlme.ages import AgeGroup, five_year_grid
from mortlme.covariates import (
    GLOBAL_KEY,
    RandomWalkModel,
    compute_covariates,
    country_covariate,
    fit_rwd,
    forecast_rwd,
    global_covariate,
    simulate_rwd,
)
from mortlme.errors import ValidationError


def published_global_trend() -> dict[int, float]:
    df = pd.read_csv(data_path("global_trend_1961_2010.csv"))
    return dict(zip(df["year"], df["value"]))


def published_country_trend(country: str, segment: str) -> dict[int, float]:
    df = pd.read_csv(data_path("country_trends_1961_2010.csv"))
    sub = df[(df["country"] == country) & (df["segment"] == segment)]
    return dict(zip(sub["year"], sub["value"]))


class TestCountryCovariate:
    def test_constant_panel(self):
        panel = make_panel(fill=lambda c, g, a, y: -5.0)
        ser = country_covariate(panel, "AA", split_age=40)
        assert all(v == -5.0 for v in ser.young.values())
        assert all(v == -5.0 for v in ser.old.values())

    def test_hand_enumerated_average(self):
        # 2 groups x 2 genders; young segment holds only group 0
        grid = (AgeGroup(0, 40), AgeGroup(40, None))
        values = {("F", 0): -7.0, ("F", 40): -3.0, ("M", 0): -6.0, ("M", 40): -2.0}
        panel = make_panel(
            countries=("AA",), grid=grid, years=[2000],
            fill=lambda c, g, a, y: values[(g, a.lower)],
        )
        ser = country_covariate(panel, "AA", split_age=0)
        assert ser.young[2000] == pytest.approx((-7.0 + -6.0) / 2)
        assert ser.old[2000] == pytest.approx((-3.0 + -2.0) / 2)

    def test_split_inside_group_rejected(self):
        panel = make_panel(grid=five_year_grid())
        with pytest.raises(ValidationError, match="inside group"):
            country_covariate(panel, "AA", split_age=42)

    def test_split_leaving_empty_segment_rejected(self):
        panel = make_panel(grid=five_year_grid())
        with pytest.raises(ValidationError, match="empty segment"):
            country_covariate(panel, "AA", split_age=110)

    def test_five_year_grid_segment_sizes(self):
        # lower bound <= 40 puts groups 0, 1-4, 5-9, ..., 40-44 young (10 groups)
        panel = make_panel(grid=five_year_grid())
        counted = {"young": 0.0, "old": 0.0}
        panel_aa = panel.data[panel.data["country"] == "AA"]
        year0 = panel_aa[panel_aa["year"] == 2000]
        young_rows = year0[year0["age_lower"] <= 40]
        assert len(young_rows) == 10 * 2
        ser = country_covariate(panel, "AA", split_age=40)
        assert ser.young[2000] == pytest.approx(young_rows["log_rate"].mean())
        del counted


class TestGlobalCovariate:
    def test_constant_panel(self):
        panel = make_panel(fill=lambda c, g, a, y: -4.0)
        ser = global_covariate(panel)
        assert all(v == -4.0 for v in ser.values.values())

    def test_equals_full_mean(self):
        panel = make_panel(rng=np.random.default_rng(3))
        ser = global_covariate(panel)
        by_year = panel.data.groupby("year")["log_rate"].mean()
        for year, value in ser.values.items():
            assert value == pytest.approx(by_year[year])


class TestFitRwd:
    def test_deterministic_walk(self):
        model = fit_rwd({2000: 0.0, 2001: 1.0, 2002: 2.0, 2003: 3.0})
        assert model.drift == pytest.approx(1.0)
        assert model.innovation_variance == pytest.approx(0.0)
        assert model.last_observed == (2003, 3.0)

    def test_published_global_trend_drift(self):
        series = published_global_trend()
        model = fit_rwd(series)
        assert model.drift == pytest.approx((-5.016 - (-4.246)) / 49, abs=1e-9)

    def test_published_country_trend_drift(self):
        series = published_country_trend("AUT", "old")
        model = fit_rwd(series)
        assert model.drift == pytest.approx((-3.008 - (-2.468)) / 49, abs=1e-9)

    def test_variance_is_unbiased_sample_variance(self):
        values = {2000 + i: v for i, v in enumerate([0.0, 0.5, -0.2, 0.9, 1.6])}
        model = fit_rwd(values)
        diffs = np.diff([0.0, 0.5, -0.2, 0.9, 1.6])
        assert model.innovation_variance == pytest.approx(diffs.var(ddof=1))

    def test_too_few_points_rejected(self):
        with pytest.raises(ValidationError):
            fit_rwd({2000: 1.0, 2001: 2.0})

    def test_gap_in_years_rejected(self):
        with pytest.raises(ValidationError, match="contiguous"):
            fit_rwd({2000: 1.0, 2002: 2.0, 2003: 3.0})


class TestForecastRwd:
    def test_global_trend_2019(self):
        model = fit_rwd(published_global_trend())
        forecast = forecast_rwd(model, 9)
        assert forecast[2019] == pytest.approx(-5.158, abs=0.002)
        assert forecast[2011] == pytest.approx(-5.032, abs=0.002)

    def test_country_trend_2019(self):
        young = fit_rwd(published_country_trend("AUT", "young"))
        old = fit_rwd(published_country_trend("AUT", "old"))
        assert forecast_rwd(young, 9)[2019] == pytest.approx(-8.035, abs=0.002)
        assert forecast_rwd(old, 9)[2019] == pytest.approx(-3.108, abs=0.002)

    def test_zero_drift_forecast_constant(self):
        model = RandomWalkModel(0.0, 0.1, (2010, -5.0))
        assert all(v == -5.0 for v in forecast_rwd(model, 5).values())

    def test_point_at_horizon_zero_is_last_observation(self):
        model = fit_rwd(published_global_trend())
        assert model.point(0) == model.last_observed[1]

    @given(drift=st.floats(-1, 1, allow_nan=False), h=st.integers(1, 30))
    def test_forecast_telescopes(self, drift, h):
        model = RandomWalkModel(drift, 0.0, (2000, 1.5))
        assert model.point(h) - model.point(h - 1) == pytest.approx(drift, abs=1e-12)


class TestSimulateRwd:
    def test_zero_variance_paths_equal_point_forecast(self):
        model = RandomWalkModel(-0.02, 0.0, (2010, -5.0))
        paths = simulate_rwd(model, 5, 8, seed=1)
        expected = np.array([model.point(h) for h in range(1, 6)])
        assert np.allclose(paths, expected[None, :])

    def test_same_seed_same_paths(self):
        model = RandomWalkModel(-0.02, 0.001, (2010, -5.0))
        a = simulate_rwd(model, 4, 16, seed=42)
        b = simulate_rwd(model, 4, 16, seed=42)
        assert np.array_equal(a, b)

    def test_mean_matches_drift_path(self):
        model = RandomWalkModel(-0.02, 0.04, (2010, -5.0))
        paths = simulate_rwd(model, 6, 10_000, seed=3)
        h = 6
        se = math.sqrt(h * model.innovation_variance / 10_000)
        assert abs(paths[:, -1].mean() - model.point(h)) < 3 * se

    def test_variance_accumulates_linearly(self):
        model = RandomWalkModel(-0.02, 0.04, (2010, -5.0))
        paths = simulate_rwd(model, 6, 10_000, seed=4)
        for h in (1, 3, 6):
            sample_var = paths[:, h - 1].var(ddof=1)
            assert sample_var == pytest.approx(h * 0.04, rel=0.1)


class TestCovariateSet:
    def test_compute_and_walk_keys(self):
        panel = make_panel(rng=np.random.default_rng(5))
        cov = compute_covariates(panel, split_age=40)
        assert set(cov.walks) == {
            GLOBAL_KEY,
            ("AA", "young"), ("AA", "old"),
            ("BB", "young"), ("BB", "old"),
        }

    def test_with_horizon_extends_all_series(self):
        panel = make_panel(years=range(2000, 2010))
        cov = compute_covariates(panel).with_horizon(3)
        assert max(cov.global_series.years) == 2012
        assert max(cov.country_series["AA"].young) == 2012
        walk = cov.walks[GLOBAL_KEY]
        assert cov.global_series.values[2012] == pytest.approx(walk.point(3))

    def test_with_values_overrides_future(self):
        panel = make_panel(years=range(2000, 2010))
        cov = compute_covariates(panel)
        cov2 = cov.with_values({GLOBAL_KEY: {2010: -9.0}})
        assert cov2.global_series.values[2010] == -9.0
        assert cov.global_series.values.get(2010) is None

    def test_csv_export(self, tmp_path):
        panel = make_panel(grid=toy_grid())
        cov = compute_covariates(panel)
        out = tmp_path / "cov.csv"
        cov.to_csv(out)
        df = pd.read_csv(out)
        assert list(df.columns) == ["country", "segment", "year", "value"]
        assert set(df["country"]) == {"ALL", "AA", "BB"}

    def test_walk_json_export(self, tmp_path):
        panel = make_panel()
        cov = compute_covariates(panel)
        out = tmp_path / "walks.json"
        cov.walks_to_json(out)
        import json

        payload = json.loads(out.read_text())
        assert "global" in payload
        assert set(payload["global"]) == {"drift", "innovation_variance", "last_year", "last_value"}
