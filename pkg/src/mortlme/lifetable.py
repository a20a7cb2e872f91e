"""Period life tables and life-expectancy series from rate surfaces.

Death probabilities come from central rates under the uniform-deaths
assumption (average fraction of the interval lived by the dying is 0.5,
all closed groups).  The terminal open group is absorbing: everyone
reaching it dies in it, and its person-years follow the constant-rate
rule survivors/m.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .ages import AgeGroup, validate_grid
from .errors import ValidationError
from .projection import RateForecast

RADIX = 100_000.0
_A = 0.5  # average fraction of a group's width lived by those dying in it


@dataclass(frozen=True)
class LifeTable:
    """One population-year table: rates, probabilities, survivors, expectancy."""

    grid: tuple[AgeGroup, ...]
    m: np.ndarray
    q: np.ndarray
    l: np.ndarray
    e: np.ndarray

    def __post_init__(self) -> None:
        if ((self.q < 0) | (self.q > 1)).any():
            raise ValidationError("death probabilities must lie in [0, 1]")
        if (np.diff(self.l) > 1e-9).any():
            raise ValidationError("survivors must be non-increasing")
        if (self.e < 0).any():
            raise ValidationError("expectancies must be non-negative")
        if self.grid[-1].is_open and self.q[-1] != 1.0:
            raise ValidationError("open terminal group must have q = 1")

    @property
    def e0(self) -> float:
        return float(self.e[0])

    def expectancy(self, age_lower: int) -> float:
        for i, group in enumerate(self.grid):
            if group.lower == age_lower:
                return float(self.e[i])
        raise ValidationError(f"no age group with lower bound {age_lower}")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "age_lower": [g.lower for g in self.grid],
                "m": self.m,
                "q": self.q,
                "l": self.l,
                "e": self.e,
            }
        )

    def to_csv(self, path: str | Path) -> None:
        self.frame().to_csv(path, index=False)


def build_life_table(rates: Mapping[int, float], age_grid) -> LifeTable:
    """Table from central death rates keyed by age-group lower bound.

    Closed group of width n: q = n m / (1 + n (1 - a) m), capped at 1.
    Open terminal group: q = 1 with person-years survivors/m, so its
    expectancy is exactly 1/m.  Survivors start from a radix of 100000
    and expectancies accumulate person-years from the oldest group down.
    """
    grid = validate_grid(age_grid)
    missing = [g.lower for g in grid if g.lower not in rates]
    if missing:
        raise ValidationError(f"rates missing for age groups {missing}")
    extra = sorted(set(rates) - {g.lower for g in grid})
    if extra:
        raise ValidationError(f"rates given for unknown age groups {extra}")
    m = np.array([float(rates[g.lower]) for g in grid])
    if (m <= 0).any() or not np.isfinite(m).all():
        raise ValidationError("central death rates must be positive and finite")

    n_groups = len(grid)
    q = np.empty(n_groups)
    for i, group in enumerate(grid):
        if group.is_open:
            q[i] = 1.0
        else:
            width = group.width
            q[i] = min(1.0, width * m[i] / (1.0 + width * (1.0 - _A) * m[i]))
    l = np.empty(n_groups)
    l[0] = RADIX
    for i in range(n_groups - 1):
        l[i + 1] = l[i] * (1.0 - q[i])

    person_years = np.empty(n_groups)
    for i, group in enumerate(grid):
        survivors_out = l[i + 1] if i + 1 < n_groups else l[i] * (1.0 - q[i])
        deaths = l[i] - survivors_out
        if group.is_open:
            person_years[i] = l[i] / m[i]
        else:
            person_years[i] = group.width * (survivors_out + _A * deaths)

    total = np.cumsum(person_years[::-1])[::-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        e = np.where(l > 0, total / np.where(l > 0, l, 1.0), 0.0)
    if grid[-1].is_open:
        e[-1] = 1.0 / m[-1]  # conditional on reaching the group
    return LifeTable(grid=grid, m=m, q=q, l=l, e=e)


def life_expectancy_series(
    forecast: RateForecast, country: str, gender: str, age_grid
) -> pd.DataFrame:
    """Per-year life expectancy at birth with bands from the rate bands.

    The point series uses the point rates; since higher rates always
    mean lower expectancy, the lower band comes from the upper-rate
    surface and the upper band from the lower-rate surface.
    """
    if not forecast.has_intervals:
        raise ValidationError("life expectancy bands need a forecast with intervals")
    grid = validate_grid(age_grid)
    sub = forecast.population(country, gender)
    records = []
    for year in sorted(sub["year"].unique()):
        block = sub[sub["year"] == year]
        by_age = block.set_index("age_lower")
        point = build_life_table(np.exp(by_age["point"]).to_dict(), grid).e0
        lower = build_life_table(np.exp(by_age["upper"]).to_dict(), grid).e0
        upper = build_life_table(np.exp(by_age["lower"]).to_dict(), grid).e0
        records.append((int(year), point, lower, upper))
    return pd.DataFrame(records, columns=["year", "point", "lower", "upper"])
