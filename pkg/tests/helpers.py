"""Shared builders for synthetic panels and mixed-model test data."""

from __future__ import annotations

import numpy as np
import pandas as pd

from mortlme.ages import AgeGroup, five_year_grid
from mortlme.design import DesignInfo, DesignMatrices, RandomTermDesign, TermInfo
from mortlme.hmd import MortalityPanel


def toy_grid() -> tuple[AgeGroup, ...]:
    return (AgeGroup(0, 41), AgeGroup(41, None))


def make_panel(
    countries=("AA", "BB"),
    genders=("F", "M"),
    grid=None,
    years=range(2000, 2010),
    fill=None,
    rng=None,
) -> MortalityPanel:
    """Rectangular panel with log rates from `fill(country, gender, group, year)`.

    Defaults to a smooth declining surface plus optional noise from `rng`.
    """
    grid = toy_grid() if grid is None else grid
    if fill is None:

        def fill(country, gender, group, year):
            base = -6.0 + 0.03 * group.lower - 0.01 * (year - 2000)
            base += 0.2 * (gender == "M") + 0.1 * (country == "BB")
            return base

    rows = []
    for country in countries:
        for gender in genders:
            for group in grid:
                for year in years:
                    value = fill(country, gender, group, year)
                    if rng is not None:
                        value += 0.01 * rng.standard_normal()
                    rows.append((country, gender, group.lower, year, value))
    data = pd.DataFrame(rows, columns=["country", "gender", "age_lower", "year", "log_rate"])
    data = data.sort_values(["country", "gender", "age_lower", "year"]).reset_index(drop=True)
    return MortalityPanel(data, tuple(grid))


def lc_surface_panel(
    countries=("AA",),
    genders=("F",),
    years=range(1990, 2015),
    seed=0,
    noise=0.0,
    grid=None,
) -> MortalityPanel:
    """Panel generated from independent Lee-Carter-style surfaces.

    Each population gets its own a_x, b_x and a downward-drifting k_t.
    """
    grid = five_year_grid() if grid is None else grid
    rng = np.random.default_rng(seed)
    years = list(years)
    rows = []
    for country in countries:
        for gender in genders:
            a = -6.5 + 4.0 * (np.arange(len(grid)) / len(grid)) ** 1.5
            b = 0.5 + rng.uniform(-0.3, 0.3, size=len(grid))
            b = b / b.sum()
            k = np.cumsum(-0.3 + 0.05 * rng.standard_normal(len(years)))
            k = k - k.mean()
            for i, group in enumerate(grid):
                for j, year in enumerate(years):
                    value = a[i] + b[i] * k[j] + noise * rng.standard_normal()
                    rows.append((country, gender, group.lower, year, value))
    data = pd.DataFrame(rows, columns=["country", "gender", "age_lower", "year", "log_rate"])
    data = data.sort_values(["country", "gender", "age_lower", "year"]).reset_index(drop=True)
    return MortalityPanel(data, tuple(grid))


def _assemble_design(y, X, terms, infos) -> DesignMatrices:
    info = DesignInfo(
        formula=None,
        grid=(),
        genders=(),
        fixed_names=tuple(f"b{j}" for j in range(X.shape[1])),
        terms=tuple(infos),
    )
    return DesignMatrices(
        y=y,
        X=X,
        fixed_names=info.fixed_names,
        terms=terms,
        rows=pd.DataFrame({"row": np.arange(len(y))}),
        info=info,
    )


def synthetic_design(
    rng,
    n=50,
    p=3,
    term_shapes=((4, 2),),
    lambdas=None,
    sigma=1.0,
) -> DesignMatrices:
    """Hand-built numeric design, bypassing panels and formulas.

    ``term_shapes`` lists (levels, regressors) per random term; each
    term's first regressor is an intercept, the rest standard normals.
    When ``lambdas`` is given, random effects with covariance
    sigma^2 Lambda Lambda' are added to the response.
    """
    X = np.ones((n, 1)) if p == 1 else np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = np.arange(1.0, p + 1.0)
    y = X @ beta + sigma * rng.standard_normal(n)
    terms, infos = [], []
    for k, (G, q) in enumerate(term_shapes):
        if n < G:
            raise ValueError("need at least one row per level")
        idx = np.concatenate([np.arange(G), rng.integers(0, G, size=n - G)])
        rng.shuffle(idx)
        Zt = np.ones((n, 1)) if q == 1 else np.column_stack(
            [np.ones(n), rng.standard_normal((n, q - 1))]
        )
        ti = TermInfo(
            group=("country",),
            regressors=tuple(f"v{j}" for j in range(q)),
            levels=tuple((f"t{k}l{i}",) for i in range(G)),
        )
        if lambdas is not None:
            eta = sigma * rng.standard_normal((G, q)) @ lambdas[k].T
            y = y + np.einsum("nq,nq->n", Zt, eta[idx])
        infos.append(ti)
        terms.append(RandomTermDesign(info=ti, level_index=idx, Zt=Zt))
    return _assemble_design(y, X, terms, infos)


def grouped_slope_design(
    rng, G=288, m=50, sd_intercept=0.066, sd_slope=0.036, sigma=0.042
) -> DesignMatrices:
    """Balanced random-intercept-and-slope data on a shared covariate."""
    x = np.tile(np.linspace(-1.0, 1.0, m), G)
    idx = np.repeat(np.arange(G), m)
    n = G * m
    X = np.column_stack([np.ones(n), x])
    eta0 = sd_intercept * rng.standard_normal(G)
    eta1 = sd_slope * rng.standard_normal(G)
    y = -5.0 + 0.8 * x + eta0[idx] + eta1[idx] * x + sigma * rng.standard_normal(n)
    ti = TermInfo(
        group=("country",),
        regressors=("v0", "v1"),
        levels=tuple((f"l{i}",) for i in range(G)),
    )
    term = RandomTermDesign(info=ti, level_index=idx, Zt=X.copy())
    return _assemble_design(y, X, [term], [ti])


def mx_file_text(years, groups, rate) -> str:
    """Render an HMD-style Mx file; `rate(year, group, gender)` gives values."""
    lines = [
        "Testland, Death rates (period 5x1), Last modified: 01 Jan 2020; Methods Protocol: v6",
        "",
        "  Year          Age             Female            Male           Total",
    ]
    for year in years:
        for group in groups:
            f = rate(year, group, "F")
            m = rate(year, group, "M")
            total = "." if f is None or m is None else f"{(f + m) / 2:.6f}"
            f_tok = "." if f is None else f"{f:.6f}"
            m_tok = "." if m is None else f"{m:.6f}"
            lines.append(f"  {year}    {group.label:>8}    {f_tok}    {m_tok}    {total}")
    return "\n".join(lines) + "\n"
