"""Multi-population mortality modelling with linear mixed effects.

Submodules:
  ages        age groups and grids
  hmd         rate-file parsing and panel assembly
  covariates  mortality trend covariates and random walks
  formula     declarative model formulas
  design      design-matrix construction
  reml        mixed-model estimation
  selection   residual cleaning and stepwise selection
  projection  rate forecasts and prediction intervals
  benchmarks  Lee-Carter and Li-Lee reference models
  lifetable   period life tables and life expectancy
  actuarial   annuity valuation (BEL, SCR)
  cli         command-line interface
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(name: str) -> Path:
    """Path of a bundled data file (reference series, sample portfolio)."""
    return Path(str(resources.files("mortlme").joinpath("data", name)))
