"""Annuity portfolio valuation: best-estimate liability and capital need.

Cash flows run on annual steps with payments at the start of each year.
Survival follows the diagonal of the projected surface, so a person aged
x in the valuation year faces the rate projected for age x+j in year
valuation+j.  One-year death probabilities come from central rates via
q = m / (1 + 0.5 m).  The capital requirement is the gap between the
99.5th-percentile liability over simulated trend paths and the
best-estimate liability, floored at zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from .ages import validate_grid
from .covariates import RandomWalkModel, forecast_rwd, simulate_rwd
from .errors import DataError, ValidationError
from .projection import RateForecast

POLICY_TYPES = ("premium_leg", "annuity_leg", "both")


@dataclass(frozen=True)
class Policy:
    """One insured: pays ``premium`` per year until retirement, then
    receives ``annuity`` per year for life; ``type`` selects the legs."""

    year_of_birth: int
    gender: str
    premium: float
    annuity: float
    type: str

    def __post_init__(self) -> None:
        if self.premium < 0 or self.annuity < 0:
            raise ValidationError("premium and annuity must be >= 0")
        if self.type not in POLICY_TYPES:
            raise ValidationError(f"policy type must be one of {POLICY_TYPES}, got {self.type!r}")


def read_portfolio(path: str | Path, defaults: Mapping[str, object] | None = None) -> list[Policy]:
    """Load policies from ``year_of_birth,gender,premium,annuity,type`` rows.

    Columns other than ``year_of_birth`` may be omitted from the file
    when ``defaults`` supplies a value for every policy; portfolio
    listings often state only birth year and premium.
    """
    frame = pd.read_csv(path)
    required = ["year_of_birth", "gender", "premium", "annuity", "type"]
    for column, value in (defaults or {}).items():
        if column == "year_of_birth":
            raise ValidationError("year_of_birth must come from the portfolio file")
        if column not in required:
            raise ValidationError(f"unknown portfolio default {column!r}")
        if column not in frame.columns:
            frame[column] = value
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"portfolio file lacks columns {missing}")
    return [
        Policy(
            year_of_birth=int(row.year_of_birth),
            gender=str(row.gender),
            premium=float(row.premium),
            annuity=float(row.annuity),
            type=str(row.type),
        )
        for row in frame.itertuples(index=False)
    ]


@dataclass(frozen=True)
class ExperienceTable:
    """Multiplicative mortality adjustments per single-year age."""

    factor: dict[int, float]

    def __post_init__(self) -> None:
        missing = [age for age in range(111) if age not in self.factor]
        if missing:
            raise ValidationError(f"experience factors missing for ages {missing[:10]}")
        bad = [age for age, f in self.factor.items() if f <= 0]
        if bad:
            raise ValidationError(f"experience factors must be > 0, got ages {bad[:10]}")

    @classmethod
    def flat(cls, value: float = 1.0) -> "ExperienceTable":
        return cls({age: value for age in range(111)})

    @classmethod
    def from_csv(cls, path: str | Path) -> "ExperienceTable":
        frame = pd.read_csv(path)
        if list(frame.columns) != ["age", "factor"]:
            raise DataError(f"experience file needs columns age,factor, got {list(frame.columns)}")
        return cls({int(r.age): float(r.factor) for r in frame.itertuples(index=False)})

    def to_csv(self, path: str | Path) -> None:
        frame = pd.DataFrame(sorted(self.factor.items()), columns=["age", "factor"])
        frame.to_csv(path, index=False)


class RateSurface:
    """Central death rates per (gender, single-year age, calendar year).

    Stored as one (ages x years) matrix per gender on contiguous year and
    age ranges, so diagonal (cohort) slices are cheap.
    """

    def __init__(self, ages: np.ndarray, years: np.ndarray, m: dict[str, np.ndarray]):
        self.ages = np.asarray(ages, dtype=int)
        self.years = np.asarray(years, dtype=int)
        if (np.diff(self.ages) != 1).any() or (np.diff(self.years) != 1).any():
            raise ValidationError("surface needs contiguous age and year ranges")
        for gender, mat in m.items():
            if mat.shape != (len(self.ages), len(self.years)):
                raise ValidationError(f"surface matrix for {gender!r} has shape {mat.shape}")
            # zero is allowed: q = 0 is the exact no-mortality limit
            if not np.isfinite(mat).all() or (mat < 0).any():
                raise ValidationError(f"surface rates for {gender!r} must be nonnegative and finite")
        self.m = {g: np.asarray(mat, dtype=float) for g, mat in m.items()}

    @classmethod
    def from_forecast(
        cls, forecast: RateForecast, country: str, age_grid, max_age: int = 110
    ) -> "RateSurface":
        """Expand a grouped log-rate forecast to single-year ages.

        Each age takes its group's rate (piecewise-constant expansion).
        The surface starts at the grid's lowest age, so a table restricted
        to older ages (a pension book, say) stays restricted.
        """
        grid = validate_grid(age_grid)
        sub = forecast.frame[forecast.frame["country"] == country]
        if sub.empty:
            raise DataError(f"country {country!r} not in forecast")
        years = np.arange(sub["year"].min(), sub["year"].max() + 1)
        ages = np.arange(grid[0].lower, max_age + 1)
        group_of = np.empty(len(ages), dtype=int)
        for i, age in enumerate(ages):
            hits = [
                j
                for j, g in enumerate(grid)
                if g.lower <= age and (g.is_open or age <= g.upper)
            ]
            if not hits:
                raise ValidationError(f"age {age} not covered by the age grid")
            group_of[i] = hits[0]
        lowers = [g.lower for g in grid]
        m: dict[str, np.ndarray] = {}
        for gender in sorted(sub["gender"].unique()):
            block = sub[sub["gender"] == gender]
            mat = block.pivot(index="age_lower", columns="year", values="point")
            mat = mat.reindex(index=lowers, columns=years)
            if mat.isna().any().any():
                missing = int(mat.isna().to_numpy().sum())
                raise DataError(f"forecast for ({country}, {gender}) lacks {missing} cells")
            m[gender] = np.exp(mat.to_numpy())[group_of, :]
        return cls(ages, years, m)

    def rate(self, gender: str, age: int, year: int) -> float:
        if gender not in self.m:
            raise DataError(f"surface has no gender {gender!r}")
        if not (self.ages[0] <= age <= self.ages[-1]) or not (
            self.years[0] <= year <= self.years[-1]
        ):
            raise DataError(f"surface has no cell (age {age}, year {year})")
        return float(self.m[gender][age - self.ages[0], year - self.years[0]])

    def diagonal(self, gender: str, age: int, year: int, length: int) -> np.ndarray:
        """Rates at (age+j, year+j) for j = 0..length-1."""
        if gender not in self.m:
            raise DataError(f"surface has no gender {gender!r}")
        if length < 0:
            raise ValidationError("diagonal length must be >= 0")
        i0 = age - self.ages[0]
        j0 = year - self.years[0]
        if i0 < 0 or j0 < 0 or i0 + length > len(self.ages) or j0 + length > len(self.years):
            raise DataError(
                f"surface does not cover the cohort path from (age {age}, year {year}) "
                f"for {length} years"
            )
        mat = self.m[gender]
        idx = np.arange(length)
        return mat[i0 + idx, j0 + idx]


def apply_experience(surface: RateSurface, table: ExperienceTable) -> RateSurface:
    """Scale every age's rates by its experience factor."""
    missing = [int(a) for a in surface.ages if int(a) not in table.factor]
    if missing:
        raise ValidationError(f"experience factors missing for ages {missing[:10]}")
    factors = np.array([table.factor[int(a)] for a in surface.ages])
    scaled = {g: mat * factors[:, None] for g, mat in surface.m.items()}
    return RateSurface(surface.ages, surface.years, scaled)


@dataclass(frozen=True)
class ValuationConfig:
    valuation_year: int
    interest_rate: float
    retirement_age: int = 65
    max_age: int = 110
    n_sim: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.retirement_age >= self.max_age:
            raise ValidationError("retirement_age must be below max_age")
        if self.interest_rate <= -1.0:
            raise ValidationError("interest_rate must exceed -1")


def _survival_curve(policy: Policy, surface: RateSurface, config: ValuationConfig) -> np.ndarray:
    """p[k] = probability of being alive k whole years after valuation."""
    current = config.valuation_year - policy.year_of_birth
    steps = config.max_age - current
    m = surface.diagonal(policy.gender, current, config.valuation_year, steps)
    q = m / (1.0 + 0.5 * m)
    p = np.empty(steps + 1)
    p[0] = 1.0
    np.cumprod(1.0 - q, out=p[1:])
    return p


def policy_bel(policy: Policy, surface: RateSurface, config: ValuationConfig) -> float:
    """Present value of the policy's legs at the valuation year.

    Payments fall at the start of each year (annuity-due): the annuity
    pays at attained ages max(current, retirement)..max_age, premiums at
    current..retirement-1.  Liability = annuity leg - premium leg, with
    ``type`` zeroing the missing leg.  Past max_age the liability is 0.
    """
    current = config.valuation_year - policy.year_of_birth
    if current < 0:
        raise ValidationError(
            f"insured born {policy.year_of_birth} after valuation year {config.valuation_year}"
        )
    if current > config.max_age:
        return 0.0
    p = _survival_curve(policy, surface, config)
    v = 1.0 / (1.0 + config.interest_rate)
    k = np.arange(len(p))
    discounted = p * v**k
    age = current + k

    annuity_pv = 0.0
    if policy.type in ("annuity_leg", "both"):
        pay = age >= max(current, config.retirement_age)
        annuity_pv = policy.annuity * float(discounted[pay].sum())
    premium_pv = 0.0
    if policy.type in ("premium_leg", "both"):
        pay = age < config.retirement_age
        premium_pv = policy.premium * float(discounted[pay].sum())
    return annuity_pv - premium_pv


def portfolio_bel(portfolio: list[Policy], surface: RateSurface, config: ValuationConfig) -> float:
    return sum(policy_bel(policy, surface, config) for policy in portfolio)


SCR_PERCENTILE = 99.5


def _nearest_rank(values: np.ndarray, percentile: float) -> float:
    ranked = np.sort(values)
    rank = math.ceil(percentile / 100.0 * len(ranked))
    return float(ranked[max(rank, 1) - 1])


def value_portfolio(
    portfolio: list[Policy],
    walks: Mapping[tuple[str, ...], RandomWalkModel],
    surface_for: Callable[[dict[tuple[str, ...], dict[int, float]]], RateSurface],
    config: ValuationConfig,
) -> dict:
    """Best-estimate liability plus the 1-in-200 capital requirement.

    ``surface_for`` turns one set of trend-path values (per walk key, a
    year -> value map spanning the 120-year horizon) into a projected
    surface.  The best estimate uses the deterministic drift paths; the
    capital requirement simulates ``config.n_sim`` joint paths, revalues
    the portfolio on each, and takes the nearest-rank 99.5th percentile
    minus the best estimate, floored at zero.  Walk j (in sorted key
    order) simulates with seed ``config.seed + j``.
    """
    if config.n_sim < 1000:
        raise ValidationError(f"capital simulation needs n_sim >= 1000, got {config.n_sim}")
    keys = sorted(walks)
    horizons = {}
    for key in keys:
        last_year = walks[key].last_observed[0]
        horizon = config.valuation_year + 120 - last_year
        if horizon < 1:
            raise ValidationError(f"walk {key} already extends past the valuation horizon")
        horizons[key] = horizon

    bel = portfolio_bel(
        portfolio,
        surface_for({key: forecast_rwd(walks[key], horizons[key]) for key in keys}),
        config,
    )

    paths = {
        key: simulate_rwd(walks[key], horizons[key], config.n_sim, config.seed + j)
        for j, key in enumerate(keys)
    }
    liabilities = np.empty(config.n_sim)
    for s in range(config.n_sim):
        values = {
            key: {
                walks[key].last_observed[0] + h + 1: float(paths[key][s, h])
                for h in range(horizons[key])
            }
            for key in keys
        }
        liabilities[s] = portfolio_bel(portfolio, surface_for(values), config)

    scr_value = max(0.0, _nearest_rank(liabilities, SCR_PERCENTILE) - bel)
    return {
        "bel": bel,
        "scr": scr_value,
        "n_sim": config.n_sim,
        "seed": config.seed,
        "percentile": SCR_PERCENTILE,
    }


def scr(portfolio, walks, surface_for, config) -> float:
    return value_portfolio(portfolio, walks, surface_for, config)["scr"]


def save_valuation(results: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(results, indent=2) + "\n")
