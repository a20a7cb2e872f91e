"""Command-line pipeline over the library modules.

Every command reads one declarative YAML configuration (``--config``) and
exchanges artifacts through a single run directory (``--out`` flag or the
``out`` config key), so commands compose through files alone:

    command     consumes                                 produces
    ingest      raw Mx files (``data`` section)          panel.csv, train.csv, test.csv
    covariates  train.csv                                covariates.csv, walks.json
    fit         train.csv, covariates.csv, walks.json    model.json, train_used.csv
                                                         [cleaning.json, dropped.csv]
    select      train.csv, covariates.csv, walks.json    selection.json
    forecast    train_used.csv, model.json,              forecast.csv
                covariates.csv, walks.json
    evaluate    forecast.csv, train.csv, test.csv        mse.csv [mse_lc.csv, mse_ll.csv]
    lifetable   forecast.csv, train_used.csv             life_expectancy.csv, lifetable.csv
    value       train_used.csv, model.json,              valuation.json
                covariates.csv, walks.json

Exit status is 0 on success, 2 for an invalid or incomplete configuration
(the failing key is named), and 3 for data or modelling errors (the module's
error text is printed).

All randomness flows from the single root ``seed`` (config key or ``--seed``):
prediction intervals use it directly; the valuation hands it to the walk
simulations, where walk j in sorted key order uses seed + j; benchmark
forecasts in ``evaluate`` use seed + 1 + i for population i in sorted order
(their point forecasts, and hence the MSE tables, do not depend on it).

Paths in the ``data`` section resolve against ``data.root``, which defaults
to the MORTLME_DATA environment variable and then to the config file's
directory.  Every other relative path resolves against the config file's
directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
import yaml

from .actuarial import (
    ExperienceTable,
    RateSurface,
    ValuationConfig,
    apply_experience,
    read_portfolio,
    save_valuation,
    value_portfolio,
)
from .ages import AgeGroup, five_year_grid, grid_from_spec, single_year_grid, validate_grid
from .benchmarks import fit_lc_many, fit_ll, forecast_lc, forecast_ll, mse, mse_comparison
from .covariates import CovariateSet, compute_covariates, load_covariates
from .design import build_design
from .errors import DataError, MortlmeError
from .formula import ModelFormula, RandomTerm
from .hmd import MortalityPanel, build_panel, read_mx_file, split_train_test
from .lifetable import build_life_table, life_expectancy_series
from .projection import RateForecast, predict_rates, prediction_intervals
from .reml import fit_at_theta, fit_reml, icc, information_criteria
from .selection import backward_select, clean_refit

ENV_DATA_ROOT = "MORTLME_DATA"


class ConfigError(Exception):
    """A missing or malformed run-configuration entry."""

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")


_KINDS = {
    "int": (int,),
    "float": (int, float),
    "str": (str,),
    "bool": (bool,),
    "list": (list,),
    "map": (dict,),
}


def _get(raw: Mapping, key: str, kind: str | None = None, required: bool = True, default: Any = None):
    node: Any = raw
    for part in key.split("."):
        if not isinstance(node, Mapping) or part not in node:
            if required:
                raise ConfigError(key, "missing")
            return default
        node = node[part]
    if kind is not None:
        # bool subclasses int, so reject it for the numeric kinds explicitly
        if isinstance(node, bool) and kind != "bool":
            raise ConfigError(key, f"expected {kind}, got a boolean")
        if not isinstance(node, _KINDS[kind]):
            raise ConfigError(key, f"expected {kind}, got {type(node).__name__}")
    return node


@dataclass
class RunContext:
    """Parsed configuration plus flag overrides for one command run."""

    raw: Mapping
    config_dir: Path
    out: Path
    overrides: dict

    @classmethod
    def load(cls, args: argparse.Namespace) -> "RunContext":
        config_path = Path(args.config)
        if not config_path.exists():
            raise ConfigError("config", f"file not found: {config_path}")
        try:
            raw = yaml.safe_load(config_path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"not valid YAML: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, Mapping):
            raise ConfigError("config", "top level must be a mapping")
        config_dir = config_path.resolve().parent

        overrides = {
            name: getattr(args, name)
            for name in ("seed", "horizon", "level", "nsim", "populations")
            if getattr(args, name, None) is not None
        }
        out = args.out if args.out else _get(raw, "out", "str", required=False, default="artifacts")
        out_dir = _resolve(config_dir, str(out))
        out_dir.mkdir(parents=True, exist_ok=True)
        return cls(raw=raw, config_dir=config_dir, out=out_dir, overrides=overrides)

    # -- config accessors --------------------------------------------------

    def seed(self) -> int:
        if "seed" in self.overrides:
            return int(self.overrides["seed"])
        value = _get(self.raw, "seed", "int", required=False)
        if value is None:
            raise ConfigError("seed", "required for simulating commands (config key or --seed)")
        return int(value)

    def seed_or(self, default: int) -> int:
        if "seed" in self.overrides:
            return int(self.overrides["seed"])
        return int(_get(self.raw, "seed", "int", required=False, default=default))

    def horizon(self) -> int:
        value = self.overrides.get("horizon", _get(self.raw, "forecast.horizon", "int", required=False))
        if value is None:
            raise ConfigError("forecast.horizon", "missing (config key or --horizon)")
        if int(value) < 1:
            raise ConfigError("forecast.horizon", f"must be >= 1, got {value}")
        return int(value)

    def level(self) -> float:
        value = self.overrides.get("level", _get(self.raw, "forecast.level", "float", required=False, default=0.95))
        if not 0.0 < float(value) < 1.0:
            raise ConfigError("forecast.level", f"must be in (0, 1), got {value}")
        return float(value)

    def n_sim(self, key: str = "forecast.n_sim", default: int = 1000) -> int:
        value = self.overrides.get("nsim", _get(self.raw, key, "int", required=False, default=default))
        if int(value) < 1:
            raise ConfigError(key, f"must be >= 1, got {value}")
        return int(value)

    def populations(self, available: list[tuple[str, str]]) -> list[tuple[str, str]] | None:
        spec = self.overrides.get("populations")
        if spec is None:
            spec = _get(self.raw, "forecast.populations", "list", required=False)
            if spec is None:
                return None
        else:
            spec = [token for token in str(spec).split(",") if token]
        chosen: list[tuple[str, str]] = []
        for token in spec:
            parts = str(token).split("/")
            if len(parts) == 1:
                matches = [pg for pg in available if pg[0] == parts[0]]
            elif len(parts) == 2:
                matches = [pg for pg in available if pg == (parts[0], parts[1])]
            else:
                raise ConfigError("forecast.populations", f"bad population {token!r}; use COUNTRY or COUNTRY/GENDER")
            if not matches:
                raise ConfigError("forecast.populations", f"{token!r} matches no fitted population")
            chosen.extend(matches)
        return sorted(set(chosen))

    def formula(self) -> ModelFormula:
        fixed = _get(self.raw, "model.fixed", "list")
        random_spec = _get(self.raw, "model.random", "list")
        terms = []
        for i, entry in enumerate(random_spec):
            if not isinstance(entry, Mapping):
                raise ConfigError(f"model.random[{i}]", "expected a mapping with group and regressors")
            group = entry.get("group")
            regressors = entry.get("regressors")
            if group is None or regressors is None:
                raise ConfigError(f"model.random[{i}]", "needs both group and regressors")
            terms.append(RandomTerm(group, tuple(regressors)))
        try:
            return ModelFormula(tuple(fixed), tuple(terms))
        except MortlmeError as exc:
            raise ConfigError("model", str(exc)) from exc

    def method(self) -> str:
        value = _get(self.raw, "model.method", "str", required=False, default="reml")
        if value not in ("reml", "ml"):
            raise ConfigError("model.method", f"must be 'reml' or 'ml', got {value!r}")
        return value

    def input_path(self, key: str, base: Path | None = None) -> Path:
        value = _get(self.raw, key, "str")
        path = _resolve(base or self.config_dir, value)
        if not path.exists():
            raise ConfigError(key, f"file not found: {path}")
        return path

    def artifact(self, name: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise DataError(f"missing artifact {name} in {self.out}; run the command that produces it first")
        return path


def _resolve(base: Path, value: str) -> Path:
    path = Path(value).expanduser()
    return path if path.is_absolute() else base / path


def _age_grid_from_spec(spec: Any) -> tuple[AgeGroup, ...]:
    if spec is None or spec == "five_year":
        return five_year_grid()
    if spec == "single_year":
        return single_year_grid()
    if isinstance(spec, str):
        # compact forms like "5x1:0-100" or "1x1:45-110"
        try:
            return grid_from_spec(spec)
        except MortlmeError as exc:
            raise ConfigError("data.age_grid", str(exc)) from exc
    if isinstance(spec, list):
        try:
            return validate_grid([AgeGroup.from_label(str(s)) for s in spec])
        except MortlmeError as exc:
            raise ConfigError("data.age_grid", str(exc)) from exc
    raise ConfigError("data.age_grid", f"expected 'five_year', 'single_year', a compact spec, or a label list, got {spec!r}")


def _population_lines(panel: MortalityPanel, what: str) -> list[str]:
    lines = []
    for (country, gender), group in panel.data.groupby(["country", "gender"], sort=True):
        y0, y1 = int(group["year"].min()), int(group["year"].max())
        lines.append(f"{country} {gender}: {len(group)} {what} records, {y0}-{y1}")
    return lines


# -- commands ---------------------------------------------------------------


def cmd_ingest(run: RunContext) -> list[str]:
    files = _get(run.raw, "data.files", "map")
    if not files:
        raise ConfigError("data.files", "no countries listed")
    root_value = _get(run.raw, "data.root", "str", required=False)
    if root_value is None:
        root_value = os.environ.get(ENV_DATA_ROOT, str(run.config_dir))
    root = _resolve(run.config_dir, root_value)

    tables = []
    for country in sorted(files):
        path = _resolve(root, str(files[country]))
        if not path.exists():
            raise ConfigError(f"data.files.{country}", f"file not found: {path}")
        tables.append(read_mx_file(path, country))

    year_range = _get(run.raw, "data.year_range", "list")
    if len(year_range) != 2 or not all(isinstance(y, int) for y in year_range):
        raise ConfigError("data.year_range", f"expected [first, last], got {year_range!r}")
    grid = _age_grid_from_spec(_get(run.raw, "data.age_grid", required=False))

    panel = build_panel(tables, (year_range[0], year_range[1]), grid)
    panel.to_csv(run.out / "panel.csv")

    cutoff = _get(run.raw, "data.train_cutoff", "int", required=False)
    if cutoff is not None:
        t0, t1 = panel.year_range
        if not (t0 <= cutoff < t1):
            raise ConfigError("data.train_cutoff", f"{cutoff} outside panel years [{t0}, {t1})")
        train, test = split_train_test(panel, cutoff)
        test.to_csv(run.out / "test.csv")
    else:
        train = panel
    train.to_csv(run.out / "train.csv")

    lines = _population_lines(panel, "panel")
    t0, t1 = train.year_range
    lines.append(f"train: {len(train)} records, {t0}-{t1}")
    if cutoff is not None:
        lines.append(f"test: {len(test)} records, {cutoff + 1}-{panel.year_range[1]}")
    return lines


def cmd_covariates(run: RunContext) -> list[str]:
    panel = MortalityPanel.from_csv(run.artifact("train.csv"))
    split_age = _get(run.raw, "covariates.split_age", "int", required=False, default=40)
    cov = compute_covariates(panel, split_age=split_age)
    cov.to_csv(run.out / "covariates.csv")
    cov.walks_to_json(run.out / "walks.json")
    lines = []
    for key in sorted(cov.walks):
        walk = cov.walks[key]
        lines.append(
            f"{'/'.join(key)}: drift {walk.drift:+.4f}, innovation variance {walk.innovation_variance:.5f}"
        )
    return lines


def _load_inputs(run: RunContext, panel_name: str) -> tuple[MortalityPanel, CovariateSet]:
    panel = MortalityPanel.from_csv(run.artifact(panel_name))
    cov = load_covariates(run.artifact("covariates.csv"), run.artifact("walks.json"))
    return panel, cov


def _fit_summary_lines(fit) -> list[str]:
    frame = fit.rows.assign(residual=fit.residuals)
    lines = []
    for (country, gender), group in frame.groupby(["country", "gender"], sort=True):
        lines.append(
            f"{country} {gender}: {len(group)} records, residual sd {group['residual'].std(ddof=0):.4f}"
        )
    return lines


def cmd_fit(run: RunContext) -> list[str]:
    formula = run.formula()
    method = run.method()
    threshold = _get(run.raw, "cleaning.threshold", "float", required=False)
    if threshold is not None and method != "reml":
        raise ConfigError("model.method", "cleaning refits with reml; drop the cleaning section to use ml")
    panel, cov = _load_inputs(run, "train.csv")

    report = None
    if threshold is not None:
        panel_used, fit, report = clean_refit(panel, cov, formula, threshold=float(threshold))
        report.dropped_to_csv(run.out / "dropped.csv")
        (run.out / "cleaning.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    else:
        panel_used = panel
        fit = fit_reml(build_design(panel, cov, formula), method=method)

    panel_used.to_csv(run.out / "train_used.csv")
    payload = {
        "formula": formula.to_dict(),
        "method": fit.method,
        "theta": fit.theta.tolist(),
        "cleaning": None if report is None else report.to_dict(),
        "summary": fit.to_dict(),
    }
    (run.out / "model.json").write_text(json.dumps(payload, indent=2) + "\n")

    lines = _fit_summary_lines(fit)
    crit = information_criteria(fit)
    lines.append(
        f"fit: {fit.method} deviance {fit.deviance:.2f}, aic {crit['aic']:.2f}, "
        f"icc {icc(fit):.3f}, converged {fit.converged}"
    )
    if report is not None:
        lines.append(
            f"cleaning: kept {report.n_after} of {report.n_before} records "
            f"({report.retained_fraction:.3f})"
        )
    return lines


def cmd_select(run: RunContext) -> list[str]:
    formula = run.formula()
    criterion = _get(run.raw, "selection.criterion", "str", required=False, default="aic")
    if criterion not in ("aic", "bic"):
        raise ConfigError("selection.criterion", f"must be 'aic' or 'bic', got {criterion!r}")
    panel, cov = _load_inputs(run, "train.csv")
    trace = backward_select(panel, cov, formula, criterion=criterion)
    trace.to_json(run.out / "selection.json")
    lines = [
        f"dropped {step.removed} [{step.phase}]: {criterion} "
        f"{step.criterion_before:.2f} -> {step.criterion_after:.2f}"
        for step in trace.steps
    ]
    if not trace.steps:
        lines.append("no term removal improved the criterion")
    lines.append(f"selected: {trace.final_formula.describe()}")
    return lines


def _rebuild_fit(run: RunContext, panel: MortalityPanel, cov: CovariateSet):
    payload = json.loads(run.artifact("model.json").read_text())
    try:
        formula = ModelFormula.from_dict(payload["formula"])
        theta = payload["theta"]
        method = payload["method"]
    except KeyError as exc:
        raise DataError(f"model.json lacks field {exc}") from exc
    design = build_design(panel, cov, formula)
    return fit_at_theta(design, theta, method=method)


def cmd_forecast(run: RunContext) -> list[str]:
    horizon = run.horizon()
    intervals = _get(run.raw, "forecast.intervals", "bool", required=False, default=True)
    if intervals:
        level, n_sim, seed = run.level(), run.n_sim(), run.seed()

    panel, cov = _load_inputs(run, "train_used.csv")
    fit = _rebuild_fit(run, panel, cov)
    last = panel.year_range[1]
    years = range(last + 1, last + 1 + horizon)
    populations = run.populations([(c, g) for c in panel.countries for g in panel.genders])
    extended = cov.with_horizon(horizon)

    if intervals:
        fc = prediction_intervals(
            fit, extended, years, n_sim=n_sim, level=level, seed=seed, populations=populations
        )
        note = f"{level:.0%} intervals from {n_sim} simulations"
    else:
        fc = predict_rates(fit, extended, years, populations=populations)
        note = "points only"
    fc.to_csv(run.out / "forecast.csv")

    return [
        f"{country} {gender}: forecast {years[0]}-{years[-1]}, {note}"
        for country, gender in _forecast_populations(fc)
    ]


def _forecast_populations(fc: RateForecast) -> list[tuple[str, str]]:
    pairs = fc.frame[["country", "gender"]].drop_duplicates().to_numpy()
    return sorted((str(c), str(g)) for c, g in pairs)


def cmd_evaluate(run: RunContext) -> list[str]:
    # the CSV schema carries no interval level; the run config is its source of truth
    fc = RateForecast.from_csv(run.artifact("forecast.csv"), level=run.level())
    train = MortalityPanel.from_csv(run.artifact("train.csv"))
    test = MortalityPanel.from_csv(run.artifact("test.csv"))
    scale = _get(run.raw, "evaluate.scale", "str", required=False, default="log")

    table = mse(fc, test, scale=scale)
    table.to_csv(run.out / "mse.csv", index=False)

    populations = _forecast_populations(fc)
    benchmarks = _get(run.raw, "evaluate.benchmarks", "list", required=False)
    if benchmarks is None:
        benchmarks = ["lc", "ll"] if len(populations) >= 2 else ["lc"]
    horizon = max(test.years) - train.year_range[1]
    if horizon < 1:
        raise DataError("test panel has no years after the training panel")
    n_sim = _get(run.raw, "evaluate.n_sim", "int", required=False, default=200)
    seed = run.seed_or(0)

    comparisons: dict[str, pd.DataFrame] = {}
    for name in benchmarks:
        if name == "lc":
            fits = fit_lc_many(train, populations=populations)
            frames = [
                forecast_lc(fits[pg], horizon, n_sim=n_sim, seed=seed + 1 + i).frame
                for i, pg in enumerate(sorted(fits))
            ]
            bench = RateForecast(pd.concat(frames, ignore_index=True), level=0.95)
        elif name == "ll":
            ll = fit_ll(train, populations=populations)
            bench = forecast_ll(ll, horizon, n_sim=n_sim, seed=seed)
        else:
            raise ConfigError("evaluate.benchmarks", f"unknown benchmark {name!r}; use lc or ll")
        comparison = mse_comparison(fc, bench, test, scale=scale)
        comparison.to_csv(run.out / f"mse_{name}.csv", index=False)
        comparisons[name] = comparison

    lines = []
    for _, row in table.iterrows():
        parts = [f"{row['country']} {row['gender']}: mse {row['mse']:.6f}"]
        for name, comparison in comparisons.items():
            match = comparison[
                (comparison["country"] == row["country"]) & (comparison["gender"] == row["gender"])
            ]
            if len(match):
                parts.append(f"{name} ratio {float(match['ratio'].iloc[0]):.2f}")
        lines.append(", ".join(parts))
    return lines


def cmd_lifetable(run: RunContext) -> list[str]:
    country = _get(run.raw, "lifetable.country", "str")
    gender = _get(run.raw, "lifetable.gender", "str")
    fc = RateForecast.from_csv(run.artifact("forecast.csv"), level=run.level())
    panel = MortalityPanel.from_csv(run.artifact("train_used.csv"))

    if fc.has_intervals:
        series = life_expectancy_series(fc, country, gender, panel.age_grid)
    else:
        sub = fc.population(country, gender)
        rows = []
        for year in sorted(sub["year"].unique()):
            cells = sub[sub["year"] == year]
            rates = {int(a): float(np.exp(p)) for a, p in zip(cells["age_lower"], cells["point"])}
            rows.append({"year": int(year), "point": build_life_table(rates, panel.age_grid).e0})
        series = pd.DataFrame(rows)
    series.to_csv(run.out / "life_expectancy.csv", index=False)

    year = _get(run.raw, "lifetable.year", "int", required=False, default=min(fc.years))
    if year not in fc.years:
        raise ConfigError("lifetable.year", f"{year} not among forecast years {fc.years[0]}-{fc.years[-1]}")
    cells = fc.population(country, gender)
    cells = cells[cells["year"] == year]
    rates = {int(a): float(np.exp(p)) for a, p in zip(cells["age_lower"], cells["point"])}
    build_life_table(rates, panel.age_grid).to_csv(run.out / "lifetable.csv")

    first, last = series.iloc[0], series.iloc[-1]
    return [
        f"{country} {gender}: e0 {first['point']:.2f} ({int(first['year'])}) -> "
        f"{last['point']:.2f} ({int(last['year'])}); table written for {year}"
    ]


def cmd_value(run: RunContext) -> list[str]:
    country = _get(run.raw, "valuation.country", "str")
    valuation_year = _get(run.raw, "valuation.valuation_year", "int")
    try:
        config = ValuationConfig(
            valuation_year=valuation_year,
            interest_rate=float(_get(run.raw, "valuation.interest_rate", "float")),
            retirement_age=_get(run.raw, "valuation.retirement_age", "int", required=False, default=65),
            max_age=_get(run.raw, "valuation.max_age", "int", required=False, default=110),
            n_sim=run.n_sim(key="valuation.n_sim", default=1000),
            seed=run.seed(),
        )
    except MortlmeError as exc:
        raise ConfigError("valuation", str(exc)) from exc
    defaults = _get(run.raw, "valuation.portfolio_defaults", "map", required=False)
    portfolio = read_portfolio(run.input_path("valuation.portfolio"), defaults=defaults)
    experience = None
    if _get(run.raw, "valuation.experience", "str", required=False) is not None:
        experience = ExperienceTable.from_csv(run.input_path("valuation.experience"))

    panel, cov = _load_inputs(run, "train_used.csv")
    fit = _rebuild_fit(run, panel, cov)
    if country not in panel.countries:
        raise ConfigError("valuation.country", f"{country!r} not among fitted countries {panel.countries}")
    last = panel.year_range[1]
    if valuation_year <= last:
        raise ConfigError("valuation.valuation_year", f"must exceed the last fitted year {last}")

    populations = [(country, g) for g in panel.genders]
    years = range(last + 1, valuation_year + 121)

    def surface_for(values):
        extended = cov.with_values(values)
        forecast = predict_rates(fit, extended, years, populations=populations)
        surface = RateSurface.from_forecast(forecast, country, panel.age_grid, max_age=config.max_age)
        return apply_experience(surface, experience) if experience is not None else surface

    results = value_portfolio(portfolio, cov.walks, surface_for, config)
    save_valuation(results, run.out / "valuation.json")
    return [
        f"{country}: bel {results['bel']:.2f}, scr {results['scr']:.2f} "
        f"({results['n_sim']} simulations, seed {results['seed']}, {len(portfolio)} policies)"
    ]


COMMANDS = {
    "ingest": cmd_ingest,
    "covariates": cmd_covariates,
    "fit": cmd_fit,
    "select": cmd_select,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "lifetable": cmd_lifetable,
    "value": cmd_value,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mortlme",
        description="Mortality modelling pipeline: ingest, fit, forecast, evaluate, value.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", help="artifact directory (default: the 'out' config key)")
    parser.add_argument("--seed", type=int, help="root seed override")
    parser.add_argument("--populations", help="comma-separated COUNTRY or COUNTRY/GENDER filter")
    parser.add_argument("--horizon", type=int, help="forecast horizon override")
    parser.add_argument("--level", type=float, help="interval level override")
    parser.add_argument("--nsim", type=int, help="simulation count override")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        run = RunContext.load(args)
        lines = COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"invalid config [{exc.key}]: {exc.message}", file=sys.stderr)
        return 2
    except MortlmeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
