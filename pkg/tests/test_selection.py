"""Cleaning and backward selection against planted-truth panels.

The cleaning oracle plants known outliers and checks the dropped key
set exactly; the selection oracle generates data from a sub-model and
checks that exactly the surplus terms are eliminated.
"""

from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from helpers import lc_surface_panel, make_panel, toy_grid

from mortlme.covariates import compute_covariates
from mortlme.design import build_design
from mortlme.errors import ValidationError
from mortlme.formula import ModelFormula, RandomTerm, single_population_formula
from mortlme.hmd import MortalityPanel
from mortlme.reml import FitSettings, fit_reml
from mortlme.selection import (
    CleaningReport,
    backward_select,
    clean_refit,
    residual_diagnostics,
)

FAST = FitSettings(tol=1e-7, max_evals=2000, start_scales=(1.0,))

LEVEL_INTERCEPTS = ModelFormula(
    fixed=("age",),
    random=(RandomTerm(("country", "gender", "age"), ("intercept",)),),
)


def flat_fill(country, gender, group, year):
    # no year trend, so only noise and planted patterns reach the residuals
    base = -6.0 + 0.03 * group.lower
    return base + 0.2 * (gender == "M") + 0.1 * (country == "BB")


class TestCleaning:
    def test_clean_panel_drops_nothing(self):
        panel = make_panel(rng=np.random.default_rng(3))
        covariates = compute_covariates(panel)
        cleaned, refit, report = clean_refit(
            panel, covariates, LEVEL_INTERCEPTS, settings=FAST
        )
        assert cleaned is panel
        assert report.dropped_keys == ()
        assert report.retained_fraction == 1.0
        assert refit.n_obs == len(panel)

    def test_planted_outliers_removed_exactly(self, tmp_path):
        panel = make_panel(fill=flat_fill, rng=np.random.default_rng(4))
        covariates = compute_covariates(panel)
        data = panel.data.copy()
        hit = data["year"] == 2004  # one record per level, 10% of the panel
        data.loc[hit, "log_rate"] += 0.5
        spiked = MortalityPanel(data, panel.age_grid)
        planted = set(map(tuple, data.loc[hit, ["country", "gender", "age_lower", "year"]].itertuples(index=False)))

        cleaned, refit, report = clean_refit(
            spiked, covariates, LEVEL_INTERCEPTS, threshold=0.1, settings=FAST
        )
        assert set(report.dropped_keys) == planted
        assert report.n_before == 80 and report.n_after == 72
        assert report.retained_fraction == pytest.approx(0.9)
        assert len(cleaned) == 72
        assert not (cleaned.data["year"] == 2004).any()
        assert refit.n_obs == 72
        # once the spikes are gone the refit explains everything else
        assert np.abs(refit.residuals).max() < 0.1

        out = tmp_path / "dropped.csv"
        report.dropped_to_csv(out)
        back = pd.read_csv(out)
        assert len(back) == 8
        assert set(back["year"]) == {2004}

        summary = report.to_dict()
        assert summary["n_dropped"] == 8
        assert summary["threshold"] == 0.1

    def test_removing_whole_level_is_an_error(self):
        panel = make_panel(fill=flat_fill, rng=np.random.default_rng(5))
        covariates = compute_covariates(panel)
        data = panel.data.copy()
        hit = (data["country"] == "AA") & (data["gender"] == "F") & (data["age_lower"] == 0)
        # alternating pattern: a random intercept cannot absorb it, so
        # every record of the level exceeds the threshold
        signs = np.where(data.loc[hit, "year"] % 2 == 0, 1.0, -1.0)
        data.loc[hit, "log_rate"] += 0.6 * signs
        spiked = MortalityPanel(data, panel.age_grid)
        with pytest.raises(ValidationError, match="removed every record"):
            clean_refit(spiked, covariates, LEVEL_INTERCEPTS, threshold=0.1, settings=FAST)

    def test_threshold_must_be_positive(self):
        panel = make_panel()
        covariates = compute_covariates(panel)
        with pytest.raises(ValidationError, match="threshold"):
            clean_refit(panel, covariates, LEVEL_INTERCEPTS, threshold=0.0)


def noise_term_panel():
    """Panel whose truth has age + per-level intercepts and no trend at all."""
    rng = np.random.default_rng(7)
    offsets = {}

    def fill(country, gender, group, year):
        key = (country, gender, group.lower)
        if key not in offsets:
            offsets[key] = 0.3 * rng.standard_normal()
        return -5.0 + 1.2 * (group.lower == 41) + offsets[key]

    return make_panel(
        countries=("AA", "BB", "CC"),
        genders=("F", "M"),
        years=range(2000, 2013),
        fill=fill,
        rng=np.random.default_rng(10),
    )


def trending_covariates():
    """Covariates from a donor panel with a steep trend, so the global
    trend series is well separated from the intercept column."""
    donor = make_panel(
        countries=("AA", "BB", "CC"),
        genders=("F", "M"),
        years=range(2000, 2013),
        fill=lambda c, g, gr, y: -5.0 + 0.5 * (gr.lower == 41) - 0.08 * (y - 2000),
    )
    return compute_covariates(donor)


class TestBackwardSelect:
    def test_required_terms_survive(self):
        panel = lc_surface_panel(noise=0.02, seed=5)
        covariates = compute_covariates(panel)
        formula = single_population_formula()
        trace = backward_select(panel, covariates, formula, settings=FAST)
        assert trace.steps == ()
        assert trace.final_formula == formula
        assert trace.criterion == "aic"

    def test_surplus_trend_terms_are_eliminated(self):
        panel = noise_term_panel()
        covariates = trending_covariates()
        formula = ModelFormula(
            fixed=("age", "kt"),
            random=(RandomTerm(("country", "gender", "age"), ("intercept", "kt")),),
        )
        trace = backward_select(panel, covariates, formula, settings=FAST)
        final = trace.final_formula
        assert final.fixed == ("age",)
        assert final.random == (RandomTerm(("country", "gender", "age"), ("intercept",)),)
        assert [s.phase for s in trace.steps] == ["random", "fixed"]
        assert trace.steps[0].removed == "(kt | country:gender:age)"
        assert trace.steps[1].removed == "kt"
        for step in trace.steps:
            assert step.criterion_after < step.criterion_before

    def test_bic_criterion_accepted(self):
        panel = noise_term_panel()
        covariates = trending_covariates()
        formula = ModelFormula(
            fixed=("age", "kt"),
            random=(RandomTerm(("country", "gender", "age"), ("intercept", "kt")),),
        )
        trace = backward_select(panel, covariates, formula, criterion="bic", settings=FAST)
        # BIC penalizes harder than AIC, so the same surplus terms go
        assert trace.final_formula.fixed == ("age",)

    def test_unknown_criterion_rejected(self):
        panel = make_panel()
        with pytest.raises(ValidationError, match="criterion"):
            backward_select(panel, compute_covariates(panel), LEVEL_INTERCEPTS, criterion="dic")

    def test_trace_serialization(self, tmp_path):
        panel = noise_term_panel()
        covariates = trending_covariates()
        formula = ModelFormula(
            fixed=("age", "kt"),
            random=(RandomTerm(("country", "gender", "age"), ("intercept", "kt")),),
        )
        trace = backward_select(panel, covariates, formula, settings=FAST)
        out = tmp_path / "trace.json"
        trace.to_json(out)
        loaded = json.loads(out.read_text())
        assert loaded["criterion"] == "aic"
        assert len(loaded["steps"]) == len(trace.steps)
        assert ModelFormula.from_dict(loaded["final_formula"]) == trace.final_formula


@pytest.fixture(scope="module")
def diagnostics_fit():
    panel = lc_surface_panel(noise=0.02, seed=9)
    design = build_design(panel, compute_covariates(panel), single_population_formula())
    return fit_reml(design, settings=FAST)


class TestResidualDiagnostics:
    def test_qq_frame(self, diagnostics_fit):
        fit = diagnostics_fit
        qq = residual_diagnostics(fit)["qq"]
        assert len(qq) == fit.n_obs
        assert np.array_equal(qq["empirical"].to_numpy(), np.sort(fit.residuals))
        theo = qq["theoretical"].to_numpy()
        assert np.all(np.diff(theo) > 0)
        assert theo[0] == pytest.approx(-theo[-1])
        slope = np.polyfit(theo, qq["empirical"], 1)[0]
        # shrinkage pulls fitted residuals slightly below the nominal scale
        assert 0.5 < slope < 1.2

    def test_bins_frame(self, diagnostics_fit):
        fit = diagnostics_fit
        bins = residual_diagnostics(fit)["bins"]
        assert len(bins) == 20
        counts = bins["count"].to_numpy()
        assert counts.sum() == fit.n_obs
        assert counts.max() - counts.min() <= 1
        fitted_means = bins["fitted_mean"].to_numpy()
        assert np.all(np.diff(fitted_means) >= 0)
        assert abs(bins["residual_mean"] @ counts) / counts.sum() < 0.01

    def test_too_few_residuals(self):
        panel = make_panel(countries=("AA",), genders=("F",), years=range(2000, 2003))
        formula = ModelFormula(
            fixed=("age",), random=(RandomTerm(("country",), ("intercept",)),)
        )
        fit = fit_reml(build_design(panel, compute_covariates(panel), formula), settings=FAST)
        with pytest.raises(ValidationError, match="at least 10"):
            residual_diagnostics(fit)
