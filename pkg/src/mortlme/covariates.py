"""Mortality covariates and their random-walk dynamics.

Two covariates drive the mixed models:

* the global trend ``k_t``: for each year, the unweighted mean of all
  log rates in the panel (all countries, genders, and age groups);
* the per-country segmented trend ``k_ct``: the same mean restricted to
  one country and split into a young segment (age groups whose lower
  bound is at or below the split age, default 40) and an old segment
  (the rest).

Each series is modelled as a random walk with drift, estimated from
first differences, and extended into the future either by the
deterministic drift path or by seeded Gaussian simulation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import DataError, ValidationError
from .hmd import MortalityPanel

#: Key of the global series inside a CovariateSet.
GLOBAL_KEY = ("global",)

SEGMENTS = ("young", "old")


def _check_series(values: Mapping[int, float], what: str) -> dict[int, float]:
    if not values:
        raise ValidationError(f"{what}: empty series")
    years = sorted(values)
    if years != list(range(years[0], years[-1] + 1)):
        raise ValidationError(f"{what}: years are not contiguous")
    out = {int(t): float(values[t]) for t in years}
    if not all(math.isfinite(v) for v in out.values()):
        raise ValidationError(f"{what}: non-finite values")
    return out


@dataclass(frozen=True)
class GlobalSeries:
    """One value per year, on contiguous years."""

    values: dict[int, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _check_series(self.values, "global series"))

    @property
    def years(self) -> list[int]:
        return sorted(self.values)


@dataclass(frozen=True)
class SegmentedSeries:
    """Per-country young/old segment means on a common year set."""

    country: str
    young: dict[int, float]
    old: dict[int, float]
    split_age: int = 40

    def __post_init__(self) -> None:
        object.__setattr__(self, "young", _check_series(self.young, f"{self.country} young"))
        object.__setattr__(self, "old", _check_series(self.old, f"{self.country} old"))
        if sorted(self.young) != sorted(self.old):
            raise ValidationError(f"{self.country}: young/old segments cover different years")

    def segment(self, name: str) -> dict[int, float]:
        if name not in SEGMENTS:
            raise KeyError(name)
        return self.young if name == "young" else self.old


@dataclass(frozen=True)
class RandomWalkModel:
    """Random walk with drift fitted to one covariate series."""

    drift: float
    innovation_variance: float
    last_observed: tuple[int, float]

    def __post_init__(self) -> None:
        if self.innovation_variance < 0:
            raise ValidationError(f"innovation variance must be >= 0, got {self.innovation_variance}")

    def point(self, horizon: int) -> float:
        """Deterministic forecast ``last + horizon * drift`` (horizon >= 0)."""
        if horizon < 0:
            raise ValidationError(f"horizon must be >= 0, got {horizon}")
        return self.last_observed[1] + horizon * self.drift

    def to_dict(self) -> dict:
        return {
            "drift": self.drift,
            "innovation_variance": self.innovation_variance,
            "last_year": self.last_observed[0],
            "last_value": self.last_observed[1],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RandomWalkModel":
        try:
            return cls(
                drift=float(data["drift"]),
                innovation_variance=float(data["innovation_variance"]),
                last_observed=(int(data["last_year"]), float(data["last_value"])),
            )
        except KeyError as exc:
            raise DataError(f"random walk record lacks field {exc}") from exc


def country_covariate(panel: MortalityPanel, country: str, split_age: int = 40) -> SegmentedSeries:
    """Young/old segment means of log rates for one country, per year.

    Segment membership is by group lower bound: groups starting at or
    below ``split_age`` are young, the rest old.  The split must land on
    a group boundary; a split inside a group would assign single-year
    ages from the same group to different segments.
    """
    grid = panel.age_grid
    for g in grid:
        if g.lower < split_age and (g.is_open or split_age < g.upper):
            raise ValidationError(
                f"split age {split_age} falls inside group {g}; use a group boundary"
            )
    young_lowers = [g.lower for g in grid if g.lower <= split_age]
    old_lowers = [g.lower for g in grid if g.lower > split_age]
    if not young_lowers or not old_lowers:
        raise ValidationError(f"split age {split_age} leaves an empty segment")

    sub = panel.data[panel.data["country"] == country]
    if sub.empty:
        raise DataError(f"country {country!r} not in panel")
    young = sub[sub["age_lower"].isin(young_lowers)].groupby("year")["log_rate"].mean()
    old = sub[sub["age_lower"].isin(old_lowers)].groupby("year")["log_rate"].mean()
    return SegmentedSeries(country, young.to_dict(), old.to_dict(), split_age)


def global_covariate(panel: MortalityPanel) -> GlobalSeries:
    """Unweighted mean log rate across all panel cells, per year."""
    if not panel.is_rectangular():
        raise ValidationError("global covariate requires a rectangular panel")
    means = panel.data.groupby("year")["log_rate"].mean()
    return GlobalSeries(means.to_dict())


def fit_rwd(series: Mapping[int, float]) -> RandomWalkModel:
    """Fit a random walk with drift to a contiguous yearly series.

    Drift is the mean first difference (equal to (last - first)/(n-1));
    the innovation variance is the unbiased sample variance of the
    first differences.  Needs at least 3 points.
    """
    values = _check_series(series, "random walk input")
    years = sorted(values)
    if len(years) < 3:
        raise ValidationError(f"need >= 3 points to fit a random walk, got {len(years)}")
    v = np.array([values[t] for t in years])
    diffs = np.diff(v)
    return RandomWalkModel(
        drift=float(diffs.mean()),
        innovation_variance=float(diffs.var(ddof=1)),
        last_observed=(years[-1], float(v[-1])),
    )


def forecast_rwd(model: RandomWalkModel, horizon: int) -> dict[int, float]:
    """Deterministic drift-path forecast for years last+1 .. last+horizon."""
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    t0 = model.last_observed[0]
    return {t0 + h: model.point(h) for h in range(1, horizon + 1)}


def simulate_rwd(model: RandomWalkModel, horizon: int, n_paths: int, seed: int) -> np.ndarray:
    """Simulate (n_paths, horizon) random-walk continuations.

    Path j at step h is last_value + sum of h innovations, each
    drift + N(0, innovation_variance).  Fixed seed, fixed output.
    """
    if horizon < 1 or n_paths < 1:
        raise ValidationError("horizon and n_paths must be >= 1")
    rng = np.random.default_rng(seed)
    sd = math.sqrt(model.innovation_variance)
    steps = model.drift + sd * rng.standard_normal((n_paths, horizon))
    return model.last_observed[1] + np.cumsum(steps, axis=1)


@dataclass(frozen=True)
class CovariateSet:
    """All covariate series for a panel, with their fitted walks.

    ``walks`` is keyed by ``("global",)`` and ``(country, segment)``.
    Series may carry forecast years beyond the walks' last observed
    year (see :meth:`with_horizon`); the walks themselves are always
    anchored at the observed end.
    """

    global_series: GlobalSeries
    country_series: dict[str, SegmentedSeries]
    split_age: int
    walks: dict[tuple[str, ...], RandomWalkModel]

    @property
    def countries(self) -> list[str]:
        return sorted(self.country_series)

    def series(self, key: tuple[str, ...]) -> dict[int, float]:
        if key == GLOBAL_KEY:
            return self.global_series.values
        country, segment = key
        return self.country_series[country].segment(segment)

    def with_values(self, updates: Mapping[tuple[str, ...], Mapping[int, float]]) -> "CovariateSet":
        """Return a copy with several series extended/overridden at once.

        Updates are applied atomically so a country's young and old
        segments stay on identical year sets; extend both together.
        """
        global_series = self.global_series
        if GLOBAL_KEY in updates:
            global_series = GlobalSeries({**global_series.values, **updates[GLOBAL_KEY]})
        by_country: dict[str, dict[str, Mapping[int, float]]] = {}
        for key, values in updates.items():
            if key == GLOBAL_KEY:
                continue
            country, segment = key
            by_country.setdefault(country, {})[segment] = values
        series = dict(self.country_series)
        for country, segments in by_country.items():
            ser = series[country]
            series[country] = SegmentedSeries(
                ser.country,
                {**ser.young, **segments.get("young", {})},
                {**ser.old, **segments.get("old", {})},
                ser.split_age,
            )
        return replace(self, global_series=global_series, country_series=series)

    def with_horizon(self, horizon: int) -> "CovariateSet":
        """Extend every series by its deterministic drift path."""
        return self.with_values({key: forecast_rwd(walk, horizon) for key, walk in self.walks.items()})

    def walks_to_json(self, path: str | Path) -> None:
        payload: dict = {"split_age": self.split_age}
        payload.update(("/".join(key), walk.to_dict()) for key, walk in sorted(self.walks.items()))
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    def to_csv(self, path: str | Path) -> None:
        """Export all series as ``country,segment,year,value`` rows.

        The global series is written with country ``ALL`` and segment
        ``global``.
        """
        rows = ["country,segment,year,value"]
        for t in self.global_series.years:
            rows.append(f"ALL,global,{t},{self.global_series.values[t]!r}")
        for country in self.countries:
            ser = self.country_series[country]
            for segment in SEGMENTS:
                vals = ser.segment(segment)
                for t in sorted(vals):
                    rows.append(f"{country},{segment},{t},{vals[t]!r}")
        Path(path).write_text("\n".join(rows) + "\n")


def compute_covariates(panel: MortalityPanel, split_age: int = 40) -> CovariateSet:
    """Compute k_t and every k_ct from a panel and fit their random walks."""
    global_series = global_covariate(panel)
    country_series = {c: country_covariate(panel, c, split_age) for c in panel.countries}
    walks: dict[tuple[str, ...], RandomWalkModel] = {GLOBAL_KEY: fit_rwd(global_series.values)}
    for country, ser in country_series.items():
        for segment in SEGMENTS:
            walks[(country, segment)] = fit_rwd(ser.segment(segment))
    return CovariateSet(global_series, country_series, split_age, walks)


def load_covariates(series_path: str | Path, walks_path: str | Path) -> CovariateSet:
    """Rebuild a covariate set from its series CSV and walk JSON exports."""
    frame = pd.read_csv(series_path, float_precision="round_trip")
    want = ["country", "segment", "year", "value"]
    if list(frame.columns) != want:
        raise DataError(f"covariate file needs columns {','.join(want)}, got {list(frame.columns)}")

    payload = json.loads(Path(walks_path).read_text())
    if "split_age" not in payload:
        raise DataError("walk file lacks the split_age field")
    split_age = int(payload.pop("split_age"))
    walks = {tuple(name.split("/")): RandomWalkModel.from_dict(rec) for name, rec in payload.items()}

    global_values: dict[int, float] = {}
    segments: dict[str, dict[str, dict[int, float]]] = {}
    for rec in frame.itertuples(index=False):
        if rec.country == "ALL" and rec.segment == "global":
            global_values[int(rec.year)] = float(rec.value)
            continue
        if rec.segment not in SEGMENTS:
            raise DataError(f"unknown covariate segment {rec.segment!r} for {rec.country}")
        segments.setdefault(rec.country, {s: {} for s in SEGMENTS})
        segments[rec.country][rec.segment][int(rec.year)] = float(rec.value)
    if not global_values:
        raise DataError("covariate file has no global series (country ALL, segment global)")

    country_series = {
        country: SegmentedSeries(country, segs["young"], segs["old"], split_age)
        for country, segs in segments.items()
    }
    missing = [key for key in walks if key != GLOBAL_KEY and key[0] not in country_series]
    if missing:
        raise DataError(f"walk file references countries absent from the series file: {missing}")
    if GLOBAL_KEY not in walks:
        raise DataError("walk file lacks the global walk")
    return CovariateSet(GlobalSeries(global_values), country_series, split_age, walks)
