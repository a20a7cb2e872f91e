"""Residual-based cleaning and backward stepwise model selection.

Cleaning is a single pass: fit, drop records with large absolute
residuals, refit.  Selection removes one term at a time, always the
removal that most improves the information criterion, until nothing
improves it.  Random-effect regressors are tested first with REML fits
(the fixed structure is unchanged, so REML criteria are comparable);
fixed terms are then tested with maximum-likelihood refits.  A fixed
term stays locked while any random term still carries the matching
regressor.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.stats

from .covariates import CovariateSet
from .design import build_design
from .errors import ValidationError
from .formula import ModelFormula
from .hmd import MortalityPanel
from .reml import FitSettings, FittedMixedModel, fit_reml, information_criteria

_KEY_COLUMNS = ["country", "gender", "age_lower", "year"]


@dataclass(frozen=True)
class CleaningReport:
    """What a cleaning pass removed."""

    threshold: float
    n_before: int
    n_after: int
    dropped_keys: tuple[tuple, ...]

    @property
    def retained_fraction(self) -> float:
        return self.n_after / self.n_before

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_before": self.n_before,
            "n_after": self.n_after,
            "retained_fraction": self.retained_fraction,
            "n_dropped": len(self.dropped_keys),
        }

    def dropped_to_csv(self, path: str | Path) -> None:
        frame = pd.DataFrame(list(self.dropped_keys), columns=_KEY_COLUMNS)
        frame.to_csv(path, index=False)


def clean_refit(
    panel: MortalityPanel,
    covariates: CovariateSet,
    formula: ModelFormula,
    threshold: float = 0.1,
    settings: FitSettings = FitSettings(),
) -> tuple[MortalityPanel, FittedMixedModel, CleaningReport]:
    """Fit, drop records with |residual| > threshold, refit once.

    The covariate series stay as computed from the full panel; cleaning
    changes which records are modelled, not the observed indices.
    """
    if threshold <= 0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    fit = fit_reml(build_design(panel, covariates, formula), settings=settings)
    exceed = np.abs(fit.residuals) > threshold
    keys = [tuple(row) for row in fit.rows.loc[exceed, _KEY_COLUMNS].itertuples(index=False)]
    report = CleaningReport(
        threshold=threshold,
        n_before=len(panel),
        n_after=len(panel) - len(keys),
        dropped_keys=tuple(keys),
    )
    if not keys:
        return panel, fit, report

    kept = fit.rows.loc[~exceed].reset_index(drop=True)
    for term in formula.random:
        columns = ["age_lower" if g == "age" else g for g in term.group]
        before = set(map(tuple, fit.rows[columns].drop_duplicates().itertuples(index=False)))
        after = set(map(tuple, kept[columns].drop_duplicates().itertuples(index=False)))
        lost = sorted(before - after)
        if lost:
            raise ValidationError(
                f"cleaning removed every record of {':'.join(term.group)} level(s) {lost}"
            )
    cleaned = MortalityPanel(kept, panel.age_grid)
    refit = fit_reml(build_design(cleaned, covariates, formula), settings=settings)
    return cleaned, refit, report


@dataclass(frozen=True)
class SelectionStep:
    phase: str  # "random" or "fixed"
    removed: str
    criterion_before: float
    criterion_after: float


@dataclass(frozen=True)
class SelectionTrace:
    criterion: str
    steps: tuple[SelectionStep, ...]
    final_formula: ModelFormula

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "steps": [
                {
                    "phase": s.phase,
                    "removed": s.removed,
                    "criterion_before": s.criterion_before,
                    "criterion_after": s.criterion_after,
                }
                for s in self.steps
            ],
            "final_formula": self.final_formula.to_dict(),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _criterion_value(fit: FittedMixedModel, which: str) -> float:
    return information_criteria(fit)[which]


def _fit_candidates(panel, covariates, candidates, method, settings):
    def one(formula: ModelFormula) -> FittedMixedModel:
        return fit_reml(build_design(panel, covariates, formula), method=method, settings=settings)

    if len(candidates) == 1:
        return [one(candidates[0][1])]
    with ThreadPoolExecutor(max_workers=min(8, len(candidates))) as pool:
        return list(pool.map(one, [formula for _, formula in candidates]))


def _eliminate(panel, covariates, formula, phase, criterion, settings, steps):
    """Greedy removal loop for one phase; returns the reduced formula."""
    method = "reml" if phase == "random" else "ml"
    current = formula
    base = fit_reml(build_design(panel, covariates, current), method=method, settings=settings)
    base_value = _criterion_value(base, criterion)
    while True:
        if phase == "random":
            candidates = []
            for group, regressor in current.random_regressor_pairs():
                try:
                    reduced = current.drop_random_regressor(group, regressor)
                except ValidationError:
                    continue  # cannot empty the random structure
                candidates.append((f"({regressor} | {':'.join(group)})", reduced))
        else:
            candidates = [(term, current.drop_fixed(term)) for term in current.removable_fixed()]
        if not candidates:
            return current
        fits = _fit_candidates(panel, covariates, candidates, method, settings)
        values = [_criterion_value(f, criterion) for f in fits]
        best = int(np.argmin(values))
        if values[best] >= base_value:
            return current
        steps.append(
            SelectionStep(
                phase=phase,
                removed=candidates[best][0],
                criterion_before=base_value,
                criterion_after=values[best],
            )
        )
        current = candidates[best][1]
        base_value = values[best]


def backward_select(
    panel: MortalityPanel,
    covariates: CovariateSet,
    formula: ModelFormula,
    criterion: str = "aic",
    settings: FitSettings = FitSettings(),
) -> SelectionTrace:
    """Backward stepwise elimination from a maximal formula.

    Returns the removal trace; a zero-step trace means nothing improved
    the criterion.  Criterion values are comparable within each phase
    (REML-based while the fixed structure is frozen, ML-based after).
    """
    if criterion not in ("aic", "bic"):
        raise ValidationError(f"criterion must be 'aic' or 'bic', got {criterion!r}")
    steps: list[SelectionStep] = []
    reduced = _eliminate(panel, covariates, formula, "random", criterion, settings, steps)
    final = _eliminate(panel, covariates, reduced, "fixed", criterion, settings, steps)
    return SelectionTrace(criterion=criterion, steps=tuple(steps), final_formula=final)


def residual_diagnostics(fit: FittedMixedModel) -> dict[str, pd.DataFrame]:
    """Normal QQ pairs and equal-count fitted-value bins of the residuals.

    QQ theoretical quantiles use the (i - 0.5)/n plotting positions of
    N(0, sigma2-hat); bins are 20 equal-count groups over the fitted
    values, each with its residual mean and variance.
    """
    n = len(fit.residuals)
    if n < 10:
        raise ValidationError(f"need at least 10 residuals, got {n}")
    positions = (np.arange(1, n + 1) - 0.5) / n
    qq = pd.DataFrame(
        {
            "theoretical": scipy.stats.norm.ppf(positions) * np.sqrt(fit.sigma2),
            "empirical": np.sort(fit.residuals),
        }
    )
    order = np.argsort(fit.fitted, kind="stable")
    records = []
    for i, chunk in enumerate(np.array_split(order, 20)):
        resid = fit.residuals[chunk]
        records.append(
            (
                i,
                float(np.mean(fit.fitted[chunk])),
                float(np.mean(resid)),
                float(np.var(resid, ddof=1)) if len(resid) > 1 else 0.0,
                len(chunk),
            )
        )
    bins = pd.DataFrame(
        records, columns=["bin", "fitted_mean", "residual_mean", "residual_variance", "count"]
    )
    return {"qq": qq, "bins": bins}
