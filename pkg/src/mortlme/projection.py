"""Rate forecasts from a fitted mixed model.

Points evaluate the linear predictor at forecast covariates with all
parameters held at their estimates.  Intervals simulate parameter and
residual uncertainty: coefficient draws from the estimated sampling
distribution, per-level random-effect draws centered on the BLUPs with
their conditional covariances, and fresh residual noise.  Covariate
paths enter deterministically; their forecast error is not propagated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .covariates import CovariateSet
from .design import design_rows
from .errors import ValidationError
from .reml import FittedMixedModel

_CELL_COLUMNS = ["country", "gender", "age_lower", "year"]


@dataclass
class RateForecast:
    """Per-cell log-rate forecasts, optionally with an interval band."""

    frame: pd.DataFrame  # country, gender, age_lower, year, point[, lower, upper]
    level: float | None = None

    def __post_init__(self) -> None:
        missing = [c for c in (*_CELL_COLUMNS, "point") if c not in self.frame.columns]
        if missing:
            raise ValidationError(f"forecast frame lacks columns {missing}")
        if self.has_intervals:
            if self.level is None or not 0.0 < self.level < 1.0:
                raise ValidationError(f"interval level must be in (0, 1), got {self.level}")
            bad = (self.frame["lower"] > self.frame["point"] + 1e-12) | (
                self.frame["point"] > self.frame["upper"] + 1e-12
            )
            if bad.any():
                raise ValidationError("intervals must satisfy lower <= point <= upper")

    @property
    def has_intervals(self) -> bool:
        return "lower" in self.frame.columns and "upper" in self.frame.columns

    @property
    def years(self) -> list[int]:
        return sorted(self.frame["year"].unique())

    def population(self, country: str, gender: str) -> pd.DataFrame:
        sub = self.frame[
            (self.frame["country"] == country) & (self.frame["gender"] == gender)
        ]
        if sub.empty:
            raise ValidationError(f"population ({country}, {gender}) not in forecast")
        return sub.reset_index(drop=True)

    def cell(self, country: str, gender: str, age_lower: int, year: int) -> dict[str, float]:
        sub = self.frame[
            (self.frame["country"] == country)
            & (self.frame["gender"] == gender)
            & (self.frame["age_lower"] == age_lower)
            & (self.frame["year"] == year)
        ]
        if sub.empty:
            raise ValidationError(f"cell ({country}, {gender}, {age_lower}, {year}) not found")
        row = sub.iloc[0]
        out = {"point": float(row["point"])}
        if self.has_intervals:
            out["lower"] = float(row["lower"])
            out["upper"] = float(row["upper"])
        return out

    def to_csv(self, path) -> None:
        out = self.frame.copy()
        if not self.has_intervals:
            out["lower"] = np.nan
            out["upper"] = np.nan
        out[[*_CELL_COLUMNS, "point", "lower", "upper"]].to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path, level: float | None = None) -> "RateForecast":
        frame = pd.read_csv(path, float_precision="round_trip")
        if frame["lower"].isna().all():
            frame = frame.drop(columns=["lower", "upper"])
            level = None
        return cls(frame, level)


def _forecast_frame(
    fit: FittedMixedModel, years, populations: list[tuple[str, str]] | None
) -> pd.DataFrame:
    years = sorted(int(y) for y in years)
    if not years:
        raise ValidationError("no forecast years given")
    cells = fit.rows[["country", "gender", "age_lower"]].drop_duplicates()
    if populations is not None:
        keys = set(populations)
        cells = cells[[tuple(pg) in keys for pg in zip(cells["country"], cells["gender"])]]
        if cells.empty:
            raise ValidationError(f"no fitted population among {sorted(keys)}")
    frame = cells.merge(pd.DataFrame({"year": years}), how="cross")
    return frame.sort_values(_CELL_COLUMNS).reset_index(drop=True)


def _linear_predictor(fit, X, terms) -> np.ndarray:
    point = X @ fit.beta
    for term, eta in zip(terms, fit.blups):
        point = point + np.einsum("nq,nq->n", term.Zt, eta[term.level_index])
    return point


def predict_rates(
    fit: FittedMixedModel,
    covariates: CovariateSet,
    years,
    populations: list[tuple[str, str]] | None = None,
) -> RateForecast:
    """Point forecasts of log rates for the fitted populations.

    The covariate set must cover the requested years (extend it with
    ``with_horizon`` first for future years).
    """
    frame = _forecast_frame(fit, years, populations)
    X, terms = design_rows(fit.info, frame, covariates)
    out = frame.copy()
    out["point"] = _linear_predictor(fit, X, terms)
    return RateForecast(out)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor F with F F' = cov for symmetric PSD input (batched ok)."""
    w, v = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    return v * np.sqrt(w)[..., None, :]


def prediction_intervals(
    fit: FittedMixedModel,
    covariates: CovariateSet,
    years,
    n_sim: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    populations: list[tuple[str, str]] | None = None,
) -> RateForecast:
    """Simulation bands around the point forecasts.

    Each simulation redraws the coefficients, the per-level random
    effects (conditioned on the data), and the residual noise; the
    interval is the empirical central ``level`` band and the reported
    point is the simulation median.  Fixed seed, fixed output.
    """
    if n_sim < 1:
        raise ValidationError(f"n_sim must be >= 1, got {n_sim}")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level}")
    frame = _forecast_frame(fit, years, populations)
    X, terms = design_rows(fit.info, frame, covariates)
    rng = np.random.default_rng(seed)

    beta_factor = _psd_factor(fit.cov_beta)
    sims = (fit.beta + rng.standard_normal((n_sim, fit.p)) @ beta_factor.T) @ X.T
    for term, eta, cond in zip(terms, fit.blups, fit.cond_cov):
        G, q = eta.shape
        factor = _psd_factor(cond)
        draws = eta + np.einsum("gab,sgb->sga", factor, rng.standard_normal((n_sim, G, q)))
        sims += np.einsum("nq,snq->sn", term.Zt, draws[:, term.level_index, :])
    sims += np.sqrt(fit.sigma2) * rng.standard_normal((n_sim, len(frame)))

    alpha = (1.0 - level) / 2.0
    out = frame.copy()
    out["point"] = np.median(sims, axis=0)
    out["lower"] = np.quantile(sims, alpha, axis=0)
    out["upper"] = np.quantile(sims, 1.0 - alpha, axis=0)
    return RateForecast(out, level=level)


@dataclass(frozen=True)
class LcForm:
    """Age profiles assembled from fixed effects plus per-age BLUPs."""

    a: dict[int, float]
    b: dict[int, float]


def to_lc_form(fit: FittedMixedModel) -> LcForm:
    """Collapse a per-age random-intercept-and-slope fit to age curves.

    Requires the single-population layout: fixed intercept and global
    trend, random intercept and trend slope grouped by age.  The level
    curve is a_x = beta0 + eta0x, the sensitivity b_x = beta1 + eta1x;
    a_x + b_x k_t reproduces the fit's linear predictor exactly.
    """
    formula = fit.formula
    ok = (
        formula is not None
        and formula.fixed == ("kt",)
        and len(formula.random) == 1
        and formula.random[0].group == ("age",)
        and formula.random[0].regressors == ("intercept", "kt")
    )
    if not ok:
        raise ValidationError(
            "LC form needs fixed (intercept, kt) and random (intercept, kt | age)"
        )
    term = fit.info.terms[0]
    eta = fit.blups[0]
    a = {level[0]: float(fit.beta[0] + eta[g, 0]) for g, level in enumerate(term.levels)}
    b = {level[0]: float(fit.beta[1] + eta[g, 1]) for g, level in enumerate(term.levels)}
    return LcForm(a=a, b=b)
