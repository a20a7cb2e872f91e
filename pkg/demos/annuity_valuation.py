"""Value the bundled annuity portfolio against a drifting mortality surface.

Uses only shipped inputs: the 20-policy portfolio (birth years and
premiums) and the experience-factor table.  Mortality follows a
Gompertz-style age curve whose level drifts down along a trend random
walk, so the capital requirement comes entirely from trend uncertainty.
Shows the best-estimate liability, the 1-in-200 capital requirement,
and how the capital scales with the walk's innovation variance.
"""

import numpy as np

from mortlme import data_path
from mortlme.actuarial import (
    ExperienceTable,
    RateSurface,
    ValuationConfig,
    apply_experience,
    read_portfolio,
    value_portfolio,
)
from mortlme.covariates import RandomWalkModel

AGES = np.arange(0, 111)
BASELINE = -9.5 + 0.085 * AGES  # log death rate at the valuation year


def surface_builder(years, experience):
    def build(values):
        path = values[("trend",)]
        level = np.array([path[int(t)] for t in years])
        m = np.exp(BASELINE[:, None] + level[None, :])
        surface = RateSurface(AGES, years, {"F": m})
        return apply_experience(surface, experience)

    return build


def main():
    config = ValuationConfig(valuation_year=2024, interest_rate=0.001, n_sim=1000, seed=11)
    portfolio = read_portfolio(
        data_path("sample_portfolio.csv"),
        defaults={"gender": "F", "annuity": 23700.0, "type": "both"},
    )
    experience = ExperienceTable.from_csv(data_path("experience_factors.csv"))
    years = np.arange(2024, 2024 + 121)
    build = surface_builder(years, experience)

    ages_now = [config.valuation_year - p.year_of_birth for p in portfolio]
    print(f"{len(portfolio)} policies, attained ages {min(ages_now)}-{max(ages_now)}, "
          f"pension 23700/yr from {config.retirement_age}")
    print()
    print("innovation variance -> best estimate and capital requirement")
    for variance in (0.0, 0.0009, 0.0036):
        walk = {("trend",): RandomWalkModel(drift=-0.012, innovation_variance=variance,
                                            last_observed=(2023, 0.0))}
        result = value_portfolio(portfolio, walk, build, config)
        print(f"  {variance:.4f}: bel {result['bel']:12.0f}   scr {result['scr']:10.0f}")
    print()
    print("zero variance pins every simulated path to the drift path, so the")
    print("99.5th-percentile liability equals the best estimate and the capital")
    print("requirement is exactly zero; widening the walk widens the capital.")


if __name__ == "__main__":
    main()
