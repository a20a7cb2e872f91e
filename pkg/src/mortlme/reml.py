"""Restricted maximum likelihood for grouped linear mixed models.

The model is y = X beta + Z eta + eps with eta stacked over grouping
levels, Cov(eta) block diagonal, and Cov(eps) = sigma2 I.  Each random
term's covariance is written sigma2 * Lambda Lambda' with Lambda lower
triangular (nonnegative diagonal), shared across that term's levels.
Fixing the relative factor Lambda profiles out both beta and sigma2,
leaving a deviance over the handful of Lambda entries (theta):

    logdet(L'Z'Z L + I) + logdet(X' P X) + (n - p) (1 + log(2 pi r2 / (n - p)))

where P absorbs the random effects and r2 is the penalized residual
sum of squares at the profiled beta.  All per-level work happens on
q x q blocks, so evaluation cost grows linearly in the number of
levels.  The maximum likelihood variant replaces the last two pieces
by n (1 + log(2 pi r2 / n)) without the fixed-block determinant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.optimize

from .design import DesignInfo, DesignMatrices, RandomTermDesign, design_rows
from .errors import ValidationError
from .formula import ModelFormula

_LOG2PI = math.log(2.0 * math.pi)
_BIG = 1e12


# -- theta packing ---------------------------------------------------------


def _tri_pairs(q: int) -> list[tuple[int, int]]:
    """(row, col) order of packed lower-triangular entries, column-major."""
    return [(i, j) for j in range(q) for i in range(j, q)]


def theta_dimension(design: DesignMatrices) -> int:
    return sum(t.n_regressors * (t.n_regressors + 1) // 2 for t in design.terms)


def _theta_slices(design: DesignMatrices) -> list[slice]:
    slices, start = [], 0
    for t in design.terms:
        size = t.n_regressors * (t.n_regressors + 1) // 2
        slices.append(slice(start, start + size))
        start += size
    return slices


def _diagonal_mask(design: DesignMatrices) -> np.ndarray:
    mask = []
    for t in design.terms:
        mask.extend(i == j for i, j in _tri_pairs(t.n_regressors))
    return np.array(mask, dtype=bool)


def _lambdas_from_theta(design: DesignMatrices, theta: np.ndarray) -> list[np.ndarray]:
    lambdas = []
    for t, sl in zip(design.terms, _theta_slices(design)):
        q = t.n_regressors
        lam = np.zeros((q, q))
        for value, (i, j) in zip(theta[sl], _tri_pairs(q)):
            lam[i, j] = value
        lambdas.append(lam)
    return lambdas


def initial_theta(design: DesignMatrices, scale: float = 1.0) -> np.ndarray:
    """Packed theta with ``scale`` on every diagonal, zero elsewhere."""
    theta = np.zeros(theta_dimension(design))
    theta[_diagonal_mask(design)] = scale
    return theta


def _validate_theta(design: DesignMatrices, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    want = theta_dimension(design)
    if theta.shape != (want,):
        raise ValidationError(f"theta must have length {want}, got shape {theta.shape}")
    if np.any(theta[_diagonal_mask(design)] < 0):
        raise ValidationError("diagonal theta entries must be nonnegative")
    return theta


# -- sufficient statistics and per-theta linear algebra --------------------


class _SingleTermCore:
    """Blockwise solver when there is one random term.

    Cross products are accumulated per grouping level once; each theta
    evaluation then only factors G small q x q blocks.
    """

    def __init__(self, design: DesignMatrices) -> None:
        term = design.terms[0]
        X, y, z = design.X, design.y, term.Zt
        idx = term.level_index
        G, q = term.n_levels, term.n_regressors
        n, p = X.shape

        self.ZtZ = np.zeros((G, q, q))
        np.add.at(self.ZtZ, idx, z[:, :, None] * z[:, None, :])
        self.ZtX = np.zeros((G, q, p))
        for j in range(q):
            np.add.at(self.ZtX[:, j, :], idx, z[:, j : j + 1] * X)
        self.Zty = np.zeros((G, q))
        np.add.at(self.Zty, idx, z * y[:, None])
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.n, self.p = n, p

    def components(self, lambdas: list[np.ndarray]):
        lam = lambdas[0]
        q = lam.shape[0]
        M = np.einsum("ba,gbc,cd->gad", lam, self.ZtZ, lam) + np.eye(q)
        L = np.linalg.cholesky(M)
        cu = np.linalg.solve(L, np.einsum("ba,gb->ga", lam, self.Zty)[:, :, None])[:, :, 0]
        CX = np.linalg.solve(L, np.einsum("ba,gbp->gap", lam, self.ZtX))
        logdet_M = 2.0 * float(np.sum(np.log(np.diagonal(L, axis1=1, axis2=2))))
        A = self.XtX - np.einsum("gap,gaq->pq", CX, CX)
        b = self.Xty - np.einsum("gap,ga->p", CX, cu)
        c = self.yty - float(np.sum(cu * cu))
        return logdet_M, A, b, c, (L, cu, CX)

    def posterior(self, lambdas, beta, sigma2, state):
        lam = lambdas[0]
        L, cu, CX = state
        rhs = (cu - CX @ beta)[:, :, None]
        u = np.linalg.solve(np.transpose(L, (0, 2, 1)), rhs)[:, :, 0]
        eta = u @ lam.T
        q = lam.shape[0]
        M = L @ np.transpose(L, (0, 2, 1))
        Minv = np.linalg.solve(M, np.broadcast_to(np.eye(q), M.shape).copy())
        cond = sigma2 * np.einsum("ab,gbc,dc->gad", lam, Minv, lam)
        return [eta], [cond]


class _MultiTermCore:
    """Dense solver over the stacked random design for several terms."""

    def __init__(self, design: DesignMatrices) -> None:
        X, y = design.X, design.y
        Zs = design.sparse_Z()
        self.ZtZ = (Zs.T @ Zs).toarray()
        self.ZtX = Zs.T @ X
        self.Zty = Zs.T @ y
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.n, self.p = X.shape
        self.offsets = design.term_offsets()
        self.shapes = [(t.n_levels, t.n_regressors) for t in design.terms]

    def _blocks(self, vec: np.ndarray) -> list[np.ndarray]:
        out = []
        for (G, q), o in zip(self.shapes, self.offsets):
            out.append(vec[o : o + G * q].reshape(G, q, *vec.shape[1:]))
        return out

    def _apply_lambda_t(self, lambdas, mat: np.ndarray) -> np.ndarray:
        """Rows of ``mat`` hit by the blockwise Lambda transpose."""
        parts = []
        for lam, block in zip(lambdas, self._blocks(mat)):
            parts.append(np.einsum("ba,gb...->ga...", lam, block).reshape(-1, *mat.shape[1:]))
        return np.concatenate(parts, axis=0)

    def components(self, lambdas: list[np.ndarray]):
        Q = self.ZtZ.shape[0]
        W = np.empty((Q, Q))
        for (Gr, qr), orr, lam_r in zip(self.shapes, self.offsets, lambdas):
            for (Gs, qs), os, lam_s in zip(self.shapes, self.offsets, lambdas):
                block = self.ZtZ[orr : orr + Gr * qr, os : os + Gs * qs]
                t4 = block.reshape(Gr, qr, Gs, qs)
                W[orr : orr + Gr * qr, os : os + Gs * qs] = np.einsum(
                    "ba,GbHc,cd->GaHd", lam_r, t4, lam_s
                ).reshape(Gr * qr, Gs * qs)
        W += np.eye(Q)
        Lw = np.linalg.cholesky(W)
        cu = scipy.linalg.solve_triangular(Lw, self._apply_lambda_t(lambdas, self.Zty), lower=True)
        CX = scipy.linalg.solve_triangular(Lw, self._apply_lambda_t(lambdas, self.ZtX), lower=True)
        logdet_M = 2.0 * float(np.sum(np.log(np.diag(Lw))))
        A = self.XtX - CX.T @ CX
        b = self.Xty - CX.T @ cu
        c = self.yty - float(cu @ cu)
        return logdet_M, A, b, c, (Lw, cu, CX)

    def posterior(self, lambdas, beta, sigma2, state):
        Lw, cu, CX = state
        u = scipy.linalg.solve_triangular(Lw.T, cu - CX @ beta, lower=False)
        Winv = scipy.linalg.cho_solve((Lw, True), np.eye(Lw.shape[0]))
        etas, conds = [], []
        for lam, ub, wb in zip(lambdas, self._blocks(u), self._blocks_diag(Winv)):
            etas.append(ub @ lam.T)
            conds.append(sigma2 * np.einsum("ab,gbc,dc->gad", lam, wb, lam))
        return etas, conds

    def _blocks_diag(self, mat: np.ndarray) -> list[np.ndarray]:
        out = []
        for (G, q), o in zip(self.shapes, self.offsets):
            blocks = np.empty((G, q, q))
            for g in range(G):
                s = o + g * q
                blocks[g] = mat[s : s + q, s : s + q]
            out.append(blocks)
        return out


def _make_core(design: DesignMatrices):
    if not design.terms:
        raise ValidationError("at least one random term is required")
    if len(design.terms) == 1:
        return _SingleTermCore(design)
    return _MultiTermCore(design)


def _deviance_from_components(logdet_M, A, b, c, n, p, method):
    R, low = scipy.linalg.cho_factor(A)
    beta = scipy.linalg.cho_solve((R, low), b)
    r2 = c - float(beta @ b)
    if r2 <= 0:
        raise np.linalg.LinAlgError("nonpositive penalized residual sum of squares")
    if method == "reml":
        logdet_A = 2.0 * float(np.sum(np.log(np.diag(R))))
        dof = n - p
        dev = logdet_M + logdet_A + dof * (1.0 + math.log(2.0 * math.pi * r2 / dof))
    else:
        dev = logdet_M + n * (1.0 + math.log(2.0 * math.pi * r2 / n))
    return dev, beta, r2, (R, low)


def profiled_reml_deviance(
    design: DesignMatrices, theta: np.ndarray, method: str = "reml"
) -> float:
    """Deviance (-2 log restricted likelihood) profiled over beta and sigma2.

    ``theta`` packs each term's lower-triangular relative factor
    column-major; diagonal entries must be nonnegative.  At theta = 0
    the value reduces to the REML deviance of the plain least-squares
    fit.  ``method="ml"`` gives the unrestricted profiled deviance.
    """
    if method not in ("reml", "ml"):
        raise ValidationError(f"method must be 'reml' or 'ml', got {method!r}")
    theta = _validate_theta(design, theta)
    core = _make_core(design)
    lambdas = _lambdas_from_theta(design, theta)
    try:
        logdet_M, A, b, c, _ = core.components(lambdas)
        dev, _, _, _ = _deviance_from_components(logdet_M, A, b, c, core.n, core.p, method)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"deviance undefined at this theta: {exc}") from exc
    return dev


# -- fitting ----------------------------------------------------------------


@dataclass(frozen=True)
class FitSettings:
    """Optimizer controls: simplex search with the diagonal kept nonnegative."""

    tol: float = 1e-8
    max_evals: int = 5000
    start_scales: tuple[float, ...] = (1.0, 0.1)


@dataclass
class FittedMixedModel:
    """A converged (or flagged) mixed-model fit with everything needed
    downstream: coefficients, variance components, BLUPs with their
    conditional covariances, and the design layout for rebuilding
    prediction rows."""

    method: str
    info: DesignInfo
    beta: np.ndarray
    beta_se: np.ndarray
    cov_beta: np.ndarray
    fixed_names: tuple[str, ...]
    theta: np.ndarray
    lambdas: list[np.ndarray]
    psi: list[np.ndarray]
    sigma2: float
    blups: list[np.ndarray]  # per term, (G, q)
    cond_cov: list[np.ndarray]  # per term, (G, q, q)
    deviance: float
    converged: bool
    boundary: bool
    n_evals: int
    n_obs: int
    fitted: np.ndarray
    residuals: np.ndarray
    rows: pd.DataFrame

    @property
    def formula(self) -> ModelFormula:
        return self.info.formula

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def n_params(self) -> int:
        """Parameters counted for information criteria: fixed effects,
        free variance-covariance entries, and the residual variance."""
        varcov = sum(t.n_regressors * (t.n_regressors + 1) // 2 for t in self.info.terms)
        return self.p + varcov + 1

    @property
    def loglik(self) -> float:
        return -0.5 * self.deviance

    @property
    def reml_criterion(self) -> float:
        if self.method != "reml":
            raise ValidationError(f"fit used method {self.method!r}, no REML criterion")
        return self.deviance

    def psi_correlations(self) -> list[np.ndarray]:
        out = []
        for psi in self.psi:
            sd = np.sqrt(np.clip(np.diag(psi), 0.0, None))
            denom = np.outer(sd, sd)
            with np.errstate(divide="ignore", invalid="ignore"):
                corr = np.where(denom > 0, psi / denom, 0.0)
            np.fill_diagonal(corr, 1.0)
            out.append(corr)
        return out

    def coefficients(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"coefficient": self.fixed_names, "estimate": self.beta, "se": self.beta_se}
        )

    def blups_frame(self) -> pd.DataFrame:
        """Tidy per-level random effects: term, level, regressor, value."""
        records = []
        for ti, eta in zip(self.info.terms, self.blups):
            for g, level in enumerate(ti.levels):
                label = ":".join(str(part) for part in level)
                for j, reg in enumerate(ti.regressors):
                    records.append((ti.label, label, reg, eta[g, j]))
        return pd.DataFrame(records, columns=["term", "level", "regressor", "value"])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "formula": self.formula.describe(),
            "coefficients": {
                name: {"estimate": float(b), "se": float(s)}
                for name, b, s in zip(self.fixed_names, self.beta, self.beta_se)
            },
            "sigma2": self.sigma2,
            "random_terms": [
                {
                    "group": ti.label,
                    "regressors": list(ti.regressors),
                    "psi": psi.tolist(),
                    "correlation": corr.tolist(),
                }
                for ti, psi, corr in zip(self.info.terms, self.psi, self.psi_correlations())
            ],
            "theta": self.theta.tolist(),
            "deviance": self.deviance,
            "loglik": self.loglik,
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "converged": self.converged,
            "boundary": self.boundary,
        }

    def save_params(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _theta_bounds(design: DesignMatrices) -> scipy.optimize.Bounds:
    mask = _diagonal_mask(design)
    lb = np.where(mask, 0.0, -np.inf)
    ub = np.full(mask.shape, np.inf)
    return scipy.optimize.Bounds(lb, ub)


def fit_reml(
    design: DesignMatrices, method: str = "reml", settings: FitSettings = FitSettings()
) -> FittedMixedModel:
    """Fit the mixed model by minimizing the profiled deviance over theta.

    Runs a bounded Nelder-Mead search from each start scale (relative
    factor = scale * identity) and keeps the best final value.  A fit
    that stops on the evaluation budget is returned with
    ``converged=False``; a relative factor with a (near) zero diagonal
    is flagged ``boundary=True``.  Neither condition raises.
    """
    if method not in ("reml", "ml"):
        raise ValidationError(f"method must be 'reml' or 'ml', got {method!r}")
    core = _make_core(design)
    n, p = core.n, core.p

    def objective(theta: np.ndarray) -> float:
        lambdas = _lambdas_from_theta(design, theta)
        try:
            logdet_M, A, b, c, _ = core.components(lambdas)
            dev, _, _, _ = _deviance_from_components(logdet_M, A, b, c, n, p, method)
        except np.linalg.LinAlgError:
            return _BIG
        return dev if np.isfinite(dev) else _BIG

    bounds = _theta_bounds(design)
    best = None
    evals = 0
    for scale in settings.start_scales:
        result = scipy.optimize.minimize(
            objective,
            initial_theta(design, scale),
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "maxfev": settings.max_evals,
                "maxiter": settings.max_evals,
                "fatol": settings.tol,
                "xatol": settings.tol,
            },
        )
        evals += result.nfev
        if best is None or result.fun < best.fun:
            best = result

    theta = np.clip(best.x, bounds.lb, bounds.ub)
    return fit_at_theta(
        design, theta, method=method, converged=bool(best.success), n_evals=evals
    )


def fit_at_theta(
    design: DesignMatrices,
    theta,
    method: str = "reml",
    converged: bool = True,
    n_evals: int = 0,
) -> FittedMixedModel:
    """Assemble the complete fit at a fixed relative factor, no search.

    Rebuilds every derived quantity (coefficients, variances, BLUPs,
    conditional covariances) deterministically, so a model saved as
    (formula, theta) can be reconstituted from the training data.
    """
    if method not in ("reml", "ml"):
        raise ValidationError(f"method must be 'reml' or 'ml', got {method!r}")
    theta = _validate_theta(design, theta)
    core = _make_core(design)
    n, p = core.n, core.p
    lambdas = _lambdas_from_theta(design, theta)
    try:
        logdet_M, A, b, c, state = core.components(lambdas)
        dev, beta, r2, chol_A = _deviance_from_components(logdet_M, A, b, c, n, p, method)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"model is numerically degenerate at this theta: {exc}") from exc

    dof = n - p if method == "reml" else n
    sigma2 = r2 / dof
    cov_beta = sigma2 * scipy.linalg.cho_solve(chol_A, np.eye(p))
    beta_se = np.sqrt(np.diag(cov_beta))
    etas, conds = core.posterior(lambdas, beta, sigma2, state)
    psi = [sigma2 * lam @ lam.T for lam in lambdas]

    fitted = design.X @ beta
    for term, eta in zip(design.terms, etas):
        fitted = fitted + np.einsum("nq,nq->n", term.Zt, eta[term.level_index])

    diag_theta = theta[_diagonal_mask(design)]
    return FittedMixedModel(
        method=method,
        info=design.info,
        beta=beta,
        beta_se=beta_se,
        cov_beta=cov_beta,
        fixed_names=design.fixed_names,
        theta=theta,
        lambdas=lambdas,
        psi=psi,
        sigma2=sigma2,
        blups=etas,
        cond_cov=conds,
        deviance=dev,
        converged=converged,
        boundary=bool(np.any(diag_theta < 1e-5)),
        n_evals=n_evals,
        n_obs=n,
        fitted=fitted,
        residuals=design.y - fitted,
        rows=design.rows,
    )


def predict_blups(fit: FittedMixedModel, design: DesignMatrices | None = None) -> pd.DataFrame:
    """Per-level predicted random effects as a tidy frame.

    With a design, the BLUPs are recomputed from scratch at the fitted
    theta and beta (useful for checking a refit on the same rows);
    otherwise the values stored on the fit are returned.
    """
    if design is None:
        return fit.blups_frame()
    core = _make_core(design)
    _, _, _, _, state = core.components(fit.lambdas)
    etas, conds = core.posterior(fit.lambdas, fit.beta, fit.sigma2, state)
    refit = FittedMixedModel(**{**fit.__dict__, "blups": etas, "cond_cov": conds})
    return refit.blups_frame()


def criteria_from(loglik: float, n_params: int, n_obs: int) -> dict[str, float]:
    """AIC and BIC from a log-likelihood, parameter count, and sample size."""
    return {
        "loglik": loglik,
        "df": float(n_params),
        "aic": -2.0 * loglik + 2.0 * n_params,
        "bic": -2.0 * loglik + math.log(n_obs) * n_params,
    }


def information_criteria(fit: FittedMixedModel) -> dict[str, float]:
    """AIC and BIC of a fit, counting every estimated parameter."""
    return criteria_from(fit.loglik, fit.n_params, fit.n_obs)


def icc(fit: FittedMixedModel) -> float:
    """Share of total variance attributed to the random effects."""
    random_var = sum(float(np.sum(np.diag(psi))) for psi in fit.psi)
    return random_var / (random_var + fit.sigma2)


def variance_decomposition(fit: FittedMixedModel) -> pd.DataFrame:
    """Per-component variances and their shares of the total."""
    records = []
    for ti, psi in zip(fit.info.terms, fit.psi):
        for j, reg in enumerate(ti.regressors):
            records.append((f"{ti.label}:{reg}", float(psi[j, j])))
    records.append(("residual", fit.sigma2))
    frame = pd.DataFrame(records, columns=["component", "variance"])
    frame["share"] = frame["variance"] / frame["variance"].sum()
    return frame
