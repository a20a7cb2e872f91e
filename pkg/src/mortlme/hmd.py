"""Ingestion of HMD-style death-rate files into a long-format panel.

Input files are whitespace-delimited tables with a free-form header
followed by a ``Year Age Female Male Total`` column line and one row
per (year, age).  The ``Age`` column is a single year (``0``), a range
(``1-4``), or the open terminal group (``110+``); missing rates are
``.``.  Only the Female and Male columns are used.

The assembled :class:`MortalityPanel` holds one record per
(country, gender, age group, year) with the natural log of the death
rate, and is rectangular over its index set: every
(country, gender, group) carries the same years.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .ages import OPEN, AgeGroup, validate_grid
from .errors import DataError, ParseError, ValidationError

#: Internal integer code for an open age-group width (CSV uses an empty field).
_OPEN_CODE = 0

GENDERS = ("F", "M")


def _width_code(group: AgeGroup) -> int:
    return _OPEN_CODE if group.is_open else group.width  # type: ignore[return-value]


def _width_from_code(code: int) -> int | None:
    return OPEN if code == _OPEN_CODE else int(code)


@dataclass(frozen=True)
class RawRateTable:
    """Parsed per-country rate file: one row per (year, age group, gender).

    ``data`` columns: year, age_lower, age_width (0 encodes the open
    group), gender, rate.
    """

    country: str
    data: pd.DataFrame

    @property
    def years(self) -> list[int]:
        return sorted(self.data["year"].unique())


def _parse_age_token(token: str) -> tuple[int, int]:
    """Return (lower, width_code) for an HMD Age token."""
    if token.endswith("+"):
        return int(token[:-1]), _OPEN_CODE
    if "-" in token:
        lo_s, hi_s = token.split("-", 1)
        lo, hi = int(lo_s), int(hi_s)
        return lo, hi - lo + 1
    return int(token), 1


def parse_mx_file(text: str, country: str) -> RawRateTable:
    """Parse an HMD-style Mx file for one country.

    Lines before the ``Year Age ...`` column header are ignored.  Each
    data row must have five whitespace-separated fields; missing rates
    (``.``) produce no record for that gender.
    """
    lines = text.splitlines()
    start = None
    for i, line in enumerate(lines):
        tokens = line.split()
        if len(tokens) >= 2 and tokens[0].lower() == "year" and tokens[1].lower() == "age":
            start = i + 1
            break
    if start is None:
        raise ParseError(f"{country}: no 'Year Age ...' column header found")

    records: list[tuple[int, int, int, str, float]] = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 5:
            raise ParseError(f"{country}: line {lineno}: expected 5 fields, got {len(tokens)}")
        try:
            year = int(tokens[0])
            lower, width = _parse_age_token(tokens[1])
        except ValueError as exc:
            raise ParseError(f"{country}: line {lineno}: {exc}") from exc
        for gender, token in zip(GENDERS, tokens[2:4]):
            if token == ".":
                continue
            try:
                rate = float(token)
            except ValueError as exc:
                raise ParseError(f"{country}: line {lineno}: bad rate {token!r}") from exc
            if rate < 0:
                raise ValidationError(f"{country}: line {lineno}: negative rate {rate}")
            records.append((year, lower, width, gender, rate))

    data = pd.DataFrame(records, columns=["year", "age_lower", "age_width", "gender", "rate"])
    return RawRateTable(country=country, data=data)


def read_mx_file(path: str | Path, country: str | None = None) -> RawRateTable:
    """Read and parse a rate file; the country code defaults to the file stem prefix."""
    path = Path(path)
    if country is None:
        country = path.stem.split(".")[0].split("_")[0]
    return parse_mx_file(path.read_text(), country)


@dataclass(frozen=True)
class MortalityPanel:
    """Rectangular long-format panel of log death rates.

    ``data`` columns: country, gender, age_lower, year, log_rate, sorted
    by (country, gender, age_lower, year).  Age-group widths live in
    ``age_grid``; records reference groups by lower bound.
    """

    data: pd.DataFrame
    age_grid: tuple[AgeGroup, ...]

    def __post_init__(self) -> None:
        validate_grid(self.age_grid)
        lowers = {g.lower for g in self.age_grid}
        bad = set(self.data["age_lower"].unique()) - lowers
        if bad:
            raise ValidationError(f"records reference age groups not in the grid: {sorted(bad)}")
        if not np.isfinite(self.data["log_rate"].to_numpy()).all():
            raise ValidationError("panel contains non-finite log rates")
        keys = self.data[["country", "gender", "age_lower", "year"]]
        if keys.duplicated().any():
            dup = keys[keys.duplicated()].iloc[0]
            raise ValidationError(f"duplicate panel key {tuple(dup)}")

    # -- basic views ----------------------------------------------------

    @property
    def countries(self) -> list[str]:
        return sorted(self.data["country"].unique())

    @property
    def genders(self) -> list[str]:
        return sorted(self.data["gender"].unique())

    @property
    def years(self) -> list[int]:
        return sorted(self.data["year"].unique())

    @property
    def year_range(self) -> tuple[int, int]:
        years = self.years
        return years[0], years[-1]

    def __len__(self) -> int:
        return len(self.data)

    def group_by_lower(self, lower: int) -> AgeGroup:
        for g in self.age_grid:
            if g.lower == lower:
                return g
        raise KeyError(lower)

    def is_rectangular(self) -> bool:
        """True when every (country, gender, group) has the same year set."""
        counts = self.data.groupby(["country", "gender", "age_lower"])["year"].count()
        return counts.nunique() == 1 and counts.iloc[0] == len(self.years)

    def filter(
        self,
        countries: list[str] | None = None,
        genders: list[str] | None = None,
    ) -> "MortalityPanel":
        data = self.data
        if countries is not None:
            data = data[data["country"].isin(countries)]
        if genders is not None:
            data = data[data["gender"].isin(genders)]
        if data.empty:
            raise DataError("panel filter selected no records")
        return MortalityPanel(data.reset_index(drop=True), self.age_grid)

    def with_column(self, name: str, values: Mapping[tuple[str, int], float]) -> "MortalityPanel":
        """Attach a country-year covariate column (e.g. GDP per capita).

        Every (country, year) cell in the panel must have a value.
        """
        if name in ("country", "gender", "age_lower", "year", "log_rate"):
            raise ValidationError(f"column name {name!r} is reserved")
        keys = list(zip(self.data["country"], self.data["year"]))
        missing = sorted({k for k in keys if k not in values})
        if missing:
            raise DataError(f"covariate {name!r} missing for {missing[:10]}")
        data = self.data.copy()
        data[name] = [float(values[k]) for k in keys]
        return MortalityPanel(data, self.age_grid)

    def rate_matrix(self, country: str, gender: str) -> pd.DataFrame:
        """Log rates for one population as an (age group x year) matrix."""
        sub = self.data[(self.data["country"] == country) & (self.data["gender"] == gender)]
        if sub.empty:
            raise DataError(f"population ({country}, {gender}) not in panel")
        mat = sub.pivot(index="age_lower", columns="year", values="log_rate")
        return mat.sort_index()

    # -- serialization ---------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        """Write ``country,gender,age_lower,age_width,year,log_rate`` rows.

        The open group's width is written as an empty field.
        """
        width_of = {g.lower: ("" if g.is_open else g.width) for g in self.age_grid}
        out = self.data.copy()
        out["age_width"] = out["age_lower"].map(width_of)
        out = out[["country", "gender", "age_lower", "age_width", "year", "log_rate"]]
        out.to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str | Path) -> "MortalityPanel":
        raw = pd.read_csv(path, dtype={"age_width": "object"}, float_precision="round_trip")
        groups = {}
        for lower, width in raw[["age_lower", "age_width"]].drop_duplicates().itertuples(index=False):
            is_open = pd.isna(width) or str(width).strip() == ""
            groups[int(lower)] = AgeGroup(int(lower), OPEN if is_open else int(float(width)))
        grid = validate_grid(sorted(groups.values(), key=lambda g: g.lower))
        data = raw[["country", "gender", "age_lower", "year", "log_rate"]].copy()
        data = data.sort_values(["country", "gender", "age_lower", "year"]).reset_index(drop=True)
        return cls(data, grid)


def build_panel(
    tables: list[RawRateTable],
    year_range: tuple[int, int],
    age_grid: tuple[AgeGroup, ...] | list[AgeGroup],
) -> MortalityPanel:
    """Assemble a rectangular log-rate panel from parsed rate tables.

    Every (country, gender, group, year) cell in the requested index
    set must be present with a positive rate; missing cells and zero
    rates abort assembly (no imputation).
    """
    grid = validate_grid(age_grid)
    t0, t1 = year_range
    if t1 < t0:
        raise ValidationError(f"invalid year range {year_range}")
    years = list(range(t0, t1 + 1))
    wanted_groups = {(g.lower, _width_code(g)) for g in grid}

    frames = []
    for table in tables:
        d = table.data
        mask = (
            d["year"].between(t0, t1)
            & d[["age_lower", "age_width"]].apply(tuple, axis=1).isin(wanted_groups)
        )
        sub = d[mask].copy()
        sub["country"] = table.country
        frames.append(sub)
    merged = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    expected = {
        (table.country, gender, g.lower, year)
        for table in tables
        for gender in GENDERS
        for g in grid
        for year in years
    }
    have = set(map(tuple, merged[["country", "gender", "age_lower", "year"]].to_numpy())) if len(merged) else set()
    missing = expected - have
    if missing:
        listing = ", ".join(map(str, sorted(missing)[:20]))
        more = "" if len(missing) <= 20 else f" (+{len(missing) - 20} more)"
        raise DataError(f"{len(missing)} missing panel cells: {listing}{more}")

    zero = merged["rate"] == 0.0
    if zero.any():
        bad = merged[zero][["country", "gender", "age_lower", "year"]].iloc[0]
        raise DataError(f"zero rate at {tuple(bad)}: log rate undefined")

    merged["log_rate"] = np.log(merged["rate"].to_numpy())
    data = merged[["country", "gender", "age_lower", "year", "log_rate"]]
    data = data.sort_values(["country", "gender", "age_lower", "year"]).reset_index(drop=True)
    return MortalityPanel(data, grid)


def split_train_test(panel: MortalityPanel, cutoff_year: int) -> tuple[MortalityPanel, MortalityPanel]:
    """Partition a panel into years <= cutoff and years > cutoff."""
    t0, t1 = panel.year_range
    if not (t0 <= cutoff_year < t1):
        raise ValidationError(f"cutoff {cutoff_year} outside panel years [{t0}, {t1})")
    train = panel.data[panel.data["year"] <= cutoff_year].reset_index(drop=True)
    test = panel.data[panel.data["year"] > cutoff_year].reset_index(drop=True)
    return MortalityPanel(train, panel.age_grid), MortalityPanel(test, panel.age_grid)
