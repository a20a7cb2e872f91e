"""Lee-Carter and Li-Lee reference models plus the MSE comparison table.

Both models factor the log-rate matrix: an age profile plus rank-1
trend term(s).  The Lee-Carter fit is the plain SVD solution with the
usual identification (sensitivities sum to one, period index sums to
zero) and a random walk with drift on the period index; there is no
second-stage re-estimation against death counts.  Li-Lee adds a common
factor fitted on the unweighted population-mean matrix, then fits the
per-population deviation factors on what remains.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .covariates import RandomWalkModel, fit_rwd, forecast_rwd, simulate_rwd
from .errors import ValidationError
from .hmd import MortalityPanel
from .projection import RateForecast

_SUM_TOL = 1e-10


def _check_sums(b: np.ndarray, k: np.ndarray, what: str) -> None:
    if abs(b.sum() - 1.0) > _SUM_TOL:
        raise ValidationError(f"{what} sensitivities must sum to 1, got {b.sum()}")
    if abs(k.sum()) > _SUM_TOL * max(1.0, np.abs(k).max()) * len(k):
        raise ValidationError(f"{what} period index must sum to 0, got {k.sum()}")


def _leading_pair(centered: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """First singular pair oriented and scaled so the age part sums to 1."""
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(centered).sum()):
        raise ValidationError(f"{what} matrix has no variation around the age profile")
    total = u[:, 0].sum()
    if abs(total) < 1e-12:
        raise ValidationError(f"{what} age sensitivities sum to zero; cannot normalize")
    b = u[:, 0] / total
    k = s[0] * total * vt[0]
    return b, k - k.mean()  # rows were centered, so the mean is fp dust


def _population_matrix(panel: MortalityPanel, country: str, gender: str) -> pd.DataFrame:
    mat = panel.rate_matrix(country, gender)
    if mat.isna().any().any():
        raise ValidationError(f"population ({country}, {gender}) is not rectangular")
    if mat.shape[0] < 3 or mat.shape[1] < 3:
        raise ValidationError(f"need at least 3 ages and 3 years, got {mat.shape}")
    return mat


@dataclass(frozen=True)
class LcFit:
    """One population's age profile, trend sensitivities, and period index."""

    country: str
    gender: str
    a: dict[int, float]
    b: dict[int, float]
    k: dict[int, float]
    rw: RandomWalkModel

    def __post_init__(self) -> None:
        _check_sums(
            np.array(list(self.b.values())), np.array(list(self.k.values())), "LC"
        )

    def to_dict(self) -> dict:
        return {
            "country": self.country,
            "gender": self.gender,
            "a": self.a,
            "b": self.b,
            "k": self.k,
            "rw": {
                "drift": self.rw.drift,
                "innovation_variance": self.rw.innovation_variance,
                "last_observed": list(self.rw.last_observed),
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def fit_lc(panel: MortalityPanel, country: str, gender: str) -> LcFit:
    """Fit the rank-1 log-rate factorization for one population."""
    mat = _population_matrix(panel, country, gender)
    ages = [int(x) for x in mat.index]
    years = [int(t) for t in mat.columns]
    values = mat.to_numpy()
    a = values.mean(axis=1)
    b, k = _leading_pair(values - a[:, None], "LC")
    rw = fit_rwd(dict(zip(years, k)))
    return LcFit(
        country=country,
        gender=gender,
        a=dict(zip(ages, a.tolist())),
        b=dict(zip(ages, b.tolist())),
        k=dict(zip(years, k.tolist())),
        rw=rw,
    )


def fit_lc_many(
    panel: MortalityPanel, populations: list[tuple[str, str]] | None = None
) -> dict[tuple[str, str], LcFit]:
    """Independent per-population fits, run in parallel."""
    if populations is None:
        populations = [(c, g) for c in panel.countries for g in panel.genders]
    with ThreadPoolExecutor(max_workers=min(8, len(populations))) as pool:
        fits = list(pool.map(lambda pg: fit_lc(panel, *pg), populations))
    return dict(zip(populations, fits))


def forecast_lc(
    fit: LcFit, horizon: int, n_sim: int = 1000, level: float = 0.95, seed: int = 0
) -> RateForecast:
    """Drift-path point forecast with bands from simulated period paths."""
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level}")
    ages = np.array(list(fit.a))
    a = np.array(list(fit.a.values()))
    b = np.array(list(fit.b.values()))
    k_point = np.array(list(forecast_rwd(fit.rw, horizon).values()))
    years = [fit.rw.last_observed[0] + h for h in range(1, horizon + 1)]

    paths = simulate_rwd(fit.rw, horizon, n_sim, seed)  # (n_sim, horizon)
    sims = a[None, :, None] + b[None, :, None] * paths[:, None, :]
    alpha = (1.0 - level) / 2.0
    lower = np.quantile(sims, alpha, axis=0)
    upper = np.quantile(sims, 1.0 - alpha, axis=0)
    point = a[:, None] + b[:, None] * k_point[None, :]

    frame = pd.DataFrame(
        {
            "country": fit.country,
            "gender": fit.gender,
            "age_lower": np.repeat(ages, horizon),
            "year": np.tile(years, len(ages)),
            "point": point.ravel(),
            "lower": np.minimum(lower, upper).ravel(),
            "upper": np.maximum(lower, upper).ravel(),
        }
    )
    return RateForecast(frame, level=level)


@dataclass(frozen=True)
class Ar1Model:
    """Mean-reverting first-order autoregression for a deviation index."""

    intercept: float
    phi: float
    innovation_variance: float
    last_observed: tuple[int, float]

    def path(self, horizon: int) -> np.ndarray:
        out = np.empty(horizon)
        value = self.last_observed[1]
        for h in range(horizon):
            value = self.intercept + self.phi * value
            out[h] = value
        return out

    def simulate(self, horizon: int, n_paths: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        sd = math.sqrt(self.innovation_variance)
        out = np.empty((n_paths, horizon))
        value = np.full(n_paths, self.last_observed[1])
        for h in range(horizon):
            value = self.intercept + self.phi * value + sd * rng.standard_normal(n_paths)
            out[:, h] = value
        return out


def _fit_ar1(years: list[int], k: np.ndarray) -> Ar1Model:
    lagged, current = k[:-1], k[1:]
    if float(np.var(lagged)) < 1e-30:  # flat index, nothing to regress on
        return Ar1Model(0.0, 0.0, 0.0, (years[-1], float(k[-1])))
    phi, intercept = np.polyfit(lagged, current, 1)
    resid = current - (intercept + phi * lagged)
    dof = max(len(resid) - 2, 1)
    return Ar1Model(
        intercept=float(intercept),
        phi=float(phi),
        innovation_variance=float(resid @ resid / dof),
        last_observed=(years[-1], float(k[-1])),
    )


@dataclass(frozen=True)
class LlSpecific:
    """Per-population deviation from the common factor."""

    alpha: dict[int, float]
    beta: dict[int, float]
    kappa: dict[int, float]
    model: Ar1Model | RandomWalkModel


@dataclass(frozen=True)
class LlFit:
    """Common factor shared by all populations plus per-population parts."""

    B: dict[int, float]
    K: dict[int, float]
    rw: RandomWalkModel
    specific: dict[tuple[str, str], LlSpecific]

    def __post_init__(self) -> None:
        _check_sums(
            np.array(list(self.B.values())), np.array(list(self.K.values())), "common"
        )

    def to_dict(self) -> dict:
        def walk(m):
            if isinstance(m, RandomWalkModel):
                return {
                    "kind": "rwd",
                    "drift": m.drift,
                    "innovation_variance": m.innovation_variance,
                    "last_observed": list(m.last_observed),
                }
            return {
                "kind": "ar1",
                "intercept": m.intercept,
                "phi": m.phi,
                "innovation_variance": m.innovation_variance,
                "last_observed": list(m.last_observed),
            }

        return {
            "B": self.B,
            "K": self.K,
            "rw": walk(self.rw),
            "specific": {
                f"{c}:{g}": {
                    "alpha": s.alpha,
                    "beta": s.beta,
                    "kappa": s.kappa,
                    "model": walk(s.model),
                }
                for (c, g), s in self.specific.items()
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def fit_ll(
    panel: MortalityPanel,
    populations: list[tuple[str, str]] | None = None,
    specific_rwd: bool = False,
) -> LlFit:
    """Two-stage common-plus-specific factorization across populations.

    Stage 1 runs the rank-1 fit on the unweighted mean of the population
    log-rate matrices.  Stage 2 factors each population's residual after
    removing its own age profile and the common trend term.  The common
    index gets a random walk with drift; each deviation index gets a
    mean-reverting AR(1) unless ``specific_rwd`` asks for a random walk.
    """
    if populations is None:
        populations = [(c, g) for c in panel.countries for g in panel.genders]
    if len(populations) < 2:
        raise ValidationError("Li-Lee needs at least two populations")
    matrices = {pg: _population_matrix(panel, *pg) for pg in populations}
    first = next(iter(matrices.values()))
    for pg, mat in matrices.items():
        if not (mat.index.equals(first.index) and mat.columns.equals(first.columns)):
            raise ValidationError(f"population {pg} is not on the shared age/year grid")
    ages = [int(x) for x in first.index]
    years = [int(t) for t in first.columns]

    pooled = np.mean([m.to_numpy() for m in matrices.values()], axis=0)
    a_pool = pooled.mean(axis=1)
    B, K = _leading_pair(pooled - a_pool[:, None], "common")
    rw = fit_rwd(dict(zip(years, K)))

    specific: dict[tuple[str, str], LlSpecific] = {}
    for pg, mat in matrices.items():
        values = mat.to_numpy()
        alpha = values.mean(axis=1)
        resid = values - alpha[:, None] - np.outer(B, K)
        scale = max(1.0, float(np.abs(values).max()))
        if np.abs(resid).max() <= 1e-10 * scale:
            # population indistinguishable from the common factor
            beta = np.full(len(ages), 1.0 / len(ages))
            kappa = np.zeros(len(years))
        else:
            beta, kappa = _leading_pair(resid, f"specific {pg}")
        if specific_rwd:
            model: Ar1Model | RandomWalkModel = fit_rwd(dict(zip(years, kappa)))
        else:
            model = _fit_ar1(years, kappa)
        specific[pg] = LlSpecific(
            alpha=dict(zip(ages, alpha.tolist())),
            beta=dict(zip(ages, beta.tolist())),
            kappa=dict(zip(years, kappa.tolist())),
            model=model,
        )
    return LlFit(
        B=dict(zip(ages, B.tolist())),
        K=dict(zip(years, K.tolist())),
        rw=rw,
        specific=specific,
    )


def forecast_ll(
    fit: LlFit, horizon: int, n_sim: int = 1000, level: float = 0.95, seed: int = 0
) -> RateForecast:
    """Forecast every population: common drift path plus deviation paths.

    Simulation seeds derive from the root seed: the common index uses it
    directly, population i (in key order) uses seed + 1 + i.
    """
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level}")
    ages = np.array(list(fit.B))
    B = np.array(list(fit.B.values()))
    years = [fit.rw.last_observed[0] + h for h in range(1, horizon + 1)]
    K_point = np.array(list(forecast_rwd(fit.rw, horizon).values()))
    K_paths = simulate_rwd(fit.rw, horizon, n_sim, seed)

    alpha_q = (1.0 - level) / 2.0
    frames = []
    for i, (pg, part) in enumerate(fit.specific.items()):
        alpha = np.array(list(part.alpha.values()))
        beta = np.array(list(part.beta.values()))
        if isinstance(part.model, RandomWalkModel):
            k_point = np.array(list(forecast_rwd(part.model, horizon).values()))
            k_paths = simulate_rwd(part.model, horizon, n_sim, seed + 1 + i)
        else:
            k_point = part.model.path(horizon)
            k_paths = part.model.simulate(horizon, n_sim, seed + 1 + i)
        point = alpha[:, None] + B[:, None] * K_point[None, :] + beta[:, None] * k_point[None, :]
        sims = (
            alpha[None, :, None]
            + B[None, :, None] * K_paths[:, None, :]
            + beta[None, :, None] * k_paths[:, None, :]
        )
        lower = np.quantile(sims, alpha_q, axis=0)
        upper = np.quantile(sims, 1.0 - alpha_q, axis=0)
        frames.append(
            pd.DataFrame(
                {
                    "country": pg[0],
                    "gender": pg[1],
                    "age_lower": np.repeat(ages, horizon),
                    "year": np.tile(years, len(ages)),
                    "point": point.ravel(),
                    "lower": np.minimum(lower, upper).ravel(),
                    "upper": np.maximum(lower, upper).ravel(),
                }
            )
        )
    frame = pd.concat(frames, ignore_index=True)
    frame = frame.sort_values(["country", "gender", "age_lower", "year"]).reset_index(drop=True)
    return RateForecast(frame, level=level)


def mse(forecast: RateForecast, actual: MortalityPanel, scale: str = "log") -> pd.DataFrame:
    """Mean squared forecast error per (country, gender) over shared cells."""
    if scale not in ("log", "natural"):
        raise ValidationError(f"scale must be 'log' or 'natural', got {scale!r}")
    merged = forecast.frame.merge(
        actual.data, on=["country", "gender", "age_lower", "year"]
    )
    if merged.empty:
        raise ValidationError("forecast and actual share no cells")
    if scale == "log":
        err = merged["point"] - merged["log_rate"]
    else:
        err = np.exp(merged["point"]) - np.exp(merged["log_rate"])
    merged["sq"] = err**2
    out = (
        merged.groupby(["country", "gender"], as_index=False)["sq"]
        .mean()
        .rename(columns={"sq": "mse"})
    )
    return out.sort_values(["country", "gender"]).reset_index(drop=True)


def mse_comparison(
    model: RateForecast,
    benchmark: RateForecast,
    actual: MortalityPanel,
    scale: str = "log",
) -> pd.DataFrame:
    """Side-by-side MSE table with the benchmark/model ratio column."""
    left = mse(model, actual, scale).rename(columns={"mse": "mse_model"})
    right = mse(benchmark, actual, scale).rename(columns={"mse": "mse_benchmark"})
    out = left.merge(right, on=["country", "gender"])
    out["ratio"] = out["mse_benchmark"] / out["mse_model"]
    return out
