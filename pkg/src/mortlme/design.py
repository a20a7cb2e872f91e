"""Design matrices: formulas plus covariates realized as numeric arrays.

The same column-building code serves the fit (rows from the training
panel) and the forecast (rows for future years), so a fitted model's
coefficients always line up with freshly built prediction rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse

from .ages import AgeGroup
from .covariates import GLOBAL_KEY, CovariateSet
from .errors import DataError, ValidationError
from .formula import ModelFormula, kc_degree, kt_degree
from .hmd import MortalityPanel

# grouping-key column -> panel column
_GROUP_TO_COLUMN = {"country": "country", "gender": "gender", "age": "age_lower"}


@dataclass(frozen=True)
class TermInfo:
    """Shape of one random term: grouping, regressors, training levels."""

    group: tuple[str, ...]
    regressors: tuple[str, ...]
    levels: tuple[tuple, ...]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def n_regressors(self) -> int:
        return len(self.regressors)

    @property
    def label(self) -> str:
        return ":".join(self.group)


@dataclass(frozen=True)
class DesignInfo:
    """Everything needed to rebuild design rows for new data."""

    formula: ModelFormula
    grid: tuple[AgeGroup, ...]
    genders: tuple[str, ...]
    fixed_names: tuple[str, ...]
    terms: tuple[TermInfo, ...]


@dataclass
class RandomTermDesign:
    """Realized random term: per-row level index and regressor values."""

    info: TermInfo
    level_index: np.ndarray  # (n,) int, position in info.levels
    Zt: np.ndarray  # (n, q) regressor values

    @property
    def n_levels(self) -> int:
        return self.info.n_levels

    @property
    def n_regressors(self) -> int:
        return self.info.n_regressors


@dataclass
class DesignMatrices:
    """Response, fixed design, and realized random terms for one fit."""

    y: np.ndarray
    X: np.ndarray
    fixed_names: tuple[str, ...]
    terms: list[RandomTermDesign]
    rows: pd.DataFrame
    info: DesignInfo

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_random(self) -> int:
        return sum(t.n_levels * t.n_regressors for t in self.terms)

    def term_offsets(self) -> list[int]:
        """Column offsets of each term inside the stacked random design."""
        offsets = [0]
        for t in self.terms:
            offsets.append(offsets[-1] + t.n_levels * t.n_regressors)
        return offsets

    def sparse_Z(self) -> scipy.sparse.csc_matrix:
        """Stacked random design, columns ordered term / level / regressor."""
        n = self.n_obs
        rows, cols, data = [], [], []
        for offset, t in zip(self.term_offsets(), self.terms):
            q = t.n_regressors
            base = offset + t.level_index * q
            for j in range(q):
                rows.append(np.arange(n))
                cols.append(base + j)
                data.append(t.Zt[:, j])
        return scipy.sparse.csc_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, self.n_random),
        )


def _map_series(years: np.ndarray, table: dict[int, float], what: str) -> np.ndarray:
    out = np.empty(len(years))
    missing = set()
    for i, year in enumerate(years):
        try:
            out[i] = table[int(year)]
        except KeyError:
            missing.add(int(year))
    if missing:
        raise DataError(f"{what} has no value for years {sorted(missing)}")
    return out


def _global_values(frame: pd.DataFrame, covariates: CovariateSet) -> np.ndarray:
    return _map_series(
        frame["year"].to_numpy(), covariates.series(GLOBAL_KEY), "global trend covariate"
    )


def _segmented_values(frame: pd.DataFrame, covariates: CovariateSet) -> np.ndarray:
    split = covariates.split_age
    countries = frame["country"].to_numpy()
    segments = np.where(frame["age_lower"].to_numpy() <= split, "young", "old")
    years = frame["year"].to_numpy()
    out = np.empty(len(frame))
    cache: dict[tuple[str, str], dict[int, float]] = {}
    missing = set()
    for i in range(len(frame)):
        key = (countries[i], segments[i])
        table = cache.get(key)
        if table is None:
            try:
                table = covariates.series(key)
            except KeyError:
                raise DataError(f"no covariate series for country {countries[i]!r}") from None
            cache[key] = table
        try:
            out[i] = table[int(years[i])]
        except KeyError:
            missing.add((countries[i], segments[i], int(years[i])))
    if missing:
        raise DataError(f"segmented trend covariate has no value for {sorted(missing)}")
    return out


def _extra_values(frame: pd.DataFrame, name: str) -> np.ndarray:
    if name not in frame.columns:
        raise DataError(f"extra covariate column {name!r} not in data")
    values = frame[name].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise DataError(f"extra covariate column {name!r} has non-finite values")
    return values


def _fixed_matrix(
    frame: pd.DataFrame, info: DesignInfo, covariates: CovariateSet
) -> tuple[np.ndarray, tuple[str, ...]]:
    n = len(frame)
    lowers = [g.lower for g in info.grid]
    labels = [g.label for g in info.grid]
    age = frame["age_lower"].to_numpy()
    gender = frame["gender"].to_numpy()

    cols: list[np.ndarray] = [np.ones(n)]
    names: list[str] = ["intercept"]

    def add(name: str, values: np.ndarray) -> None:
        cols.append(values)
        names.append(name)

    for term in info.formula.fixed:
        if term == "age":
            # first group is the reference level
            for lo, label in zip(lowers[1:], labels[1:]):
                add(f"age[{label}]", (age == lo).astype(float))
        elif term == "gender:age":
            if len(info.genders) < 2:
                raise ValidationError("gender:age term needs at least two gender levels")
            for g in info.genders[1:]:
                gmask = (gender == g).astype(float)
                for lo, label in zip(lowers, labels):
                    add(f"gender{g}:age[{label}]", gmask * (age == lo))
        elif term == "cohort":
            add("cohort", frame["year"].to_numpy(dtype=float) - age)
        elif (deg := kt_degree(term)) is not None:
            add(term, _global_values(frame, covariates) ** deg)
        elif (deg := kc_degree(term)) is not None:
            base = _segmented_values(frame, covariates) ** deg
            suffix = "" if deg == 1 else str(deg)
            for g in info.genders:
                gmask = (gender == g).astype(float)
                for lo, label in zip(lowers, labels):
                    add(f"gender{g}:age[{label}]:kc{suffix}", gmask * (age == lo) * base)
        else:
            add(term, _extra_values(frame, term))

    return np.column_stack(cols), tuple(names)


def _random_values(
    frame: pd.DataFrame, regressors: tuple[str, ...], covariates: CovariateSet
) -> np.ndarray:
    n = len(frame)
    cols = []
    for name in regressors:
        if name == "intercept":
            cols.append(np.ones(n))
        elif name == "cohort":
            cols.append(
                frame["year"].to_numpy(dtype=float) - frame["age_lower"].to_numpy(dtype=float)
            )
        elif (deg := kt_degree(name)) is not None:
            cols.append(_global_values(frame, covariates) ** deg)
        else:
            cols.append(_extra_values(frame, name))
    return np.column_stack(cols)


def _level_keys(frame: pd.DataFrame, group: tuple[str, ...]) -> list[tuple]:
    columns = [_GROUP_TO_COLUMN[g] for g in group]
    return list(map(tuple, frame[columns].itertuples(index=False, name=None)))


def _check_full_rank(X: np.ndarray, names: tuple[str, ...]) -> None:
    n, p = X.shape
    if n <= p:
        raise ValidationError(f"need more observations than fixed effects ({n} rows, p={p})")
    _, R, pivots = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        collinear = sorted(names[j] for j in pivots[rank:])
        raise ValidationError(f"fixed design is rank deficient; collinear columns: {collinear}")


def build_design(
    panel: MortalityPanel, covariates: CovariateSet, formula: ModelFormula
) -> DesignMatrices:
    """Realize a formula against a panel and its covariates.

    Columns are ordered intercept first, then each fixed term expanded
    in grid/gender order.  The fixed matrix must have full column rank;
    the offending columns are named otherwise.
    """
    frame = panel.data.reset_index(drop=True)
    if frame.empty:
        raise ValidationError("empty panel")
    genders = tuple(panel.genders)

    info = DesignInfo(
        formula=formula,
        grid=tuple(panel.age_grid),
        genders=genders,
        fixed_names=(),
        terms=(),
    )
    X, fixed_names = _fixed_matrix(frame, info, covariates)
    _check_full_rank(X, fixed_names)

    terms: list[RandomTermDesign] = []
    term_infos: list[TermInfo] = []
    for rt in formula.random:
        keys = _level_keys(frame, rt.group)
        levels = tuple(sorted(set(keys)))
        index_of = {level: i for i, level in enumerate(levels)}
        level_index = np.array([index_of[k] for k in keys], dtype=np.intp)
        ti = TermInfo(group=rt.group, regressors=rt.regressors, levels=levels)
        term_infos.append(ti)
        terms.append(
            RandomTermDesign(
                info=ti,
                level_index=level_index,
                Zt=_random_values(frame, rt.regressors, covariates),
            )
        )

    info = DesignInfo(
        formula=formula,
        grid=tuple(panel.age_grid),
        genders=genders,
        fixed_names=fixed_names,
        terms=tuple(term_infos),
    )
    return DesignMatrices(
        y=frame["log_rate"].to_numpy(dtype=float),
        X=X,
        fixed_names=fixed_names,
        terms=terms,
        rows=frame,
        info=info,
    )


def design_rows(
    info: DesignInfo, frame: pd.DataFrame, covariates: CovariateSet
) -> tuple[np.ndarray, list[RandomTermDesign]]:
    """Build fixed and random design rows for new data under a fitted layout.

    ``frame`` needs country, gender, age_lower, and year columns (plus
    any extra covariate columns the formula names).  Levels unseen at
    fit time have no predicted random effects and are rejected.
    """
    frame = frame.reset_index(drop=True)
    X, names = _fixed_matrix(frame, info, covariates)
    if names != info.fixed_names:
        raise ValidationError("rebuilt fixed columns do not match the fitted layout")
    terms = []
    for ti in info.terms:
        index_of = {level: i for i, level in enumerate(ti.levels)}
        keys = _level_keys(frame, ti.group)
        unseen = sorted({k for k in keys if k not in index_of})
        if unseen:
            raise ValidationError(
                f"levels of {ti.label} not present at fit time: {unseen[:10]}"
            )
        level_index = np.array([index_of[k] for k in keys], dtype=np.intp)
        terms.append(
            RandomTermDesign(
                info=ti,
                level_index=level_index,
                Zt=_random_values(frame, ti.regressors, covariates),
            )
        )
    return X, terms
