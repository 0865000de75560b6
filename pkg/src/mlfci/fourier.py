"""Closed-form forecast standard error from a Fourier-basis regression.

The point forecast can come from any pooled least-squares learner (in this
library, the neural network); the standard error is computed from an
auxiliary Fourier OLS fit on the same panel. The estimator clusters by time
period: with H' = W' Phi_T (Psi'Psi)^{-1},

    se^2 = sum_t ( H' Phi_{t-1}' e_t )^2,

where e_t stacks the OLS residuals of period t. Only the residuals of the
Fourier fit enter; the forecaster's own residuals are never used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .errors import NumericalError
from .panel import Panel


@dataclass(frozen=True)
class FourierBasis:
    """phi(x) = 1, then sin(j*scale*x_k), cos(j*scale*x_k) for each feature k
    (ascending) and order j = 1..J (ascending), sin before cos."""

    order: int
    input_dim: int
    scale: float = math.pi / 4.0
    include_intercept: bool = True

    def __post_init__(self):
        if self.order < 1 or self.input_dim < 1:
            raise ValueError("order and input_dim must be positive")

    @property
    def dim(self) -> int:
        return int(self.include_intercept) + 2 * self.order * self.input_dim


def expand(basis: FourierBasis, features: np.ndarray) -> np.ndarray:
    """Evaluate the basis row-wise on an (n, d) feature matrix."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != basis.input_dim:
        raise ValueError(f"features must have {basis.input_dim} columns, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    n, d = X.shape
    out = np.empty((n, basis.dim))
    col = 0
    if basis.include_intercept:
        out[:, 0] = 1.0
        col = 1
    for k in range(d):
        xk = X[:, k]
        for j in range(1, basis.order + 1):
            arg = (j * basis.scale) * xk
            out[:, col] = np.sin(arg)
            out[:, col + 1] = np.cos(arg)
            col += 2
    return out


@dataclass
class OlsFit:
    """Pooled OLS fit of returns on the expanded basis.

    residuals is an (N, T) matrix aligned with the panel (NaN where the panel
    has no observation); gram is Psi'Psi over all pooled rows.
    """

    coefficients: np.ndarray
    gram: np.ndarray
    residuals: np.ndarray
    _chol: tuple = None

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol, rhs)


_COND_LIMIT = 1e14


def _solve_normal_equations(gram: np.ndarray, rhs: np.ndarray):
    """Cholesky solve with jitter escalation; declares singularity when the
    Gram matrix is numerically rank deficient."""
    eigs = np.linalg.eigvalsh(gram)
    if eigs[-1] <= 0 or eigs[0] <= eigs[-1] / _COND_LIMIT:
        cond = np.inf if eigs[0] <= 0 else eigs[-1] / eigs[0]
        raise NumericalError(
            f"Gram matrix numerically singular (condition estimate {cond:.3e})"
        )
    base = np.trace(gram) / gram.shape[0]
    jitter = 0.0
    while True:
        try:
            chol = cho_factor(gram + jitter * np.eye(gram.shape[0]), lower=True)
            return cho_solve(chol, rhs), chol
        except np.linalg.LinAlgError:
            jitter = 1e-10 * base if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-6 * base:
                cond = eigs[-1] / eigs[0]
                raise NumericalError(
                    f"Gram matrix numerically singular (condition estimate {cond:.3e})"
                ) from None


def fit_ols(panel: Panel, basis: FourierBasis) -> OlsFit:
    """Least-squares fit over all pooled (i, t) observations.

    The Gram matrix and cross-moment are accumulated period by period so the
    full design matrix is never materialized.
    """
    if panel.n_features != basis.input_dim:
        raise ValueError("basis input_dim does not match panel characteristics")
    if panel.n_observations < basis.dim:
        raise ValueError(
            f"need at least {basis.dim} observations for a {basis.dim}-dim basis, "
            f"have {panel.n_observations}"
        )
    J = basis.dim
    gram = np.zeros((J, J))
    xty = np.zeros(J)
    for t in range(panel.n_periods):
        live = panel.mask[:, t]
        if not live.any():
            continue
        phi = expand(basis, panel.features[live, t, :])
        gram += phi.T @ phi
        xty += phi.T @ panel.returns[live, t]
    theta, chol = _solve_normal_equations(gram, xty)

    residuals = np.full(panel.returns.shape, np.nan)
    for t in range(panel.n_periods):
        live = panel.mask[:, t]
        if not live.any():
            continue
        phi = expand(basis, panel.features[live, t, :])
        residuals[live, t] = panel.returns[live, t] - phi @ theta
    return OlsFit(coefficients=theta, gram=gram, residuals=residuals, _chol=chol)


@dataclass
class SeResult:
    se: float
    H: np.ndarray
    per_period_terms: np.ndarray

    def to_dict(self, point_forecast: float | None = None, level: float | None = None) -> dict:
        doc = {"se": self.se, "per_period_terms": self.per_period_terms.tolist()}
        if point_forecast is not None and level is not None:
            lo, hi = fci(point_forecast, self.se, level)
            doc.update({"point_forecast": point_forecast, "level": level,
                        "interval": [lo, hi]})
        return doc


def analytic_se(fit: OlsFit, basis: FourierBasis, panel: Panel,
                weights: np.ndarray, x_latest: np.ndarray) -> SeResult:
    """Time-clustered standard error of the weighted forecast W' g(x_latest)."""
    W = np.asarray(weights, dtype=float)
    x_latest = np.asarray(x_latest, dtype=float)
    if W.shape != (panel.n_assets,):
        raise ValueError(f"weights must have shape ({panel.n_assets},)")
    phi_latest = expand(basis, x_latest)
    H = fit.solve_gram(phi_latest.T @ W)
    terms = np.zeros(panel.n_periods)
    for t in range(panel.n_periods):
        live = panel.mask[:, t]
        if not live.any():
            continue
        phi = expand(basis, panel.features[live, t, :])
        terms[t] = (phi @ H) @ fit.residuals[live, t]
    return SeResult(se=float(np.sqrt(terms @ terms)), H=H, per_period_terms=terms)


def per_asset_analytic_se(fit: OlsFit, basis: FourierBasis, panel: Panel,
                          x_latest: np.ndarray) -> np.ndarray:
    """Vector of standard errors for the R individual forecasts g(x_latest_r).

    Equivalent to calling analytic_se once per one-hot weight vector, done
    jointly for speed. x_latest may have any number of rows (one per target
    asset); clustering still runs over the fitting panel.
    """
    phi_latest = expand(basis, np.atleast_2d(x_latest))
    G = fit.solve_gram(phi_latest.T).T              # (R, J)
    acc = np.zeros(G.shape[0])
    for t in range(panel.n_periods):
        live = panel.mask[:, t]
        if not live.any():
            continue
        phi = expand(basis, panel.features[live, t, :])
        s_t = G @ (phi.T @ fit.residuals[live, t])
        acc += s_t * s_t
    return np.sqrt(acc)


def critical_value(level: float) -> float:
    """Two-sided standard-normal critical value for a confidence level."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be strictly between 0 and 1")
    return float(norm.ppf(0.5 + level / 2.0))


def fci(point_forecast: float, se: float, level: float) -> tuple:
    """Symmetric forecast confidence interval around the point forecast."""
    if se < 0:
        raise ValueError("se must be non-negative")
    eps = critical_value(level)
    return (point_forecast - eps * se, point_forecast + eps * se)
