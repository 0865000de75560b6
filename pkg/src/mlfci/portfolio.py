"""Portfolio construction under forecast uncertainty.

Covers the classic mean-variance solution, the uncertainty-averse max-min
portfolio solved as an adaptive Lasso via coordinate descent (optionally with
a full-investment constraint), the two-asset closed form, the risk-sensitive
double-shrinkage portfolio, a linear-shrinkage covariance estimator, and the
mapping from forecast standard errors to per-asset uncertainty quantiles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError
from .fourier import critical_value

_CD_TOL = 1e-10
_CD_MAX_SWEEPS = 10_000
_KKT_TOL = 1e-8
_BUDGET_TOL = 1e-8


@dataclass(frozen=True)
class UaProblem:
    """Uncertainty-averse mean-variance instance.

    q_alpha[i] is the half-width of asset i's forecast confidence interval;
    the max-min problem over means inside those intervals is equivalent to an
    adaptive Lasso with per-asset penalty q_alpha[i].
    """

    z_hat: np.ndarray
    q_alpha: np.ndarray
    sigma: np.ndarray
    gamma: float
    budget_constraint: bool = False

    def __post_init__(self):
        z = np.asarray(self.z_hat, dtype=float)
        q = np.asarray(self.q_alpha, dtype=float)
        s = np.asarray(self.sigma, dtype=float)
        if z.ndim != 1:
            raise ValueError("z_hat must be a vector")
        if q.shape != z.shape:
            raise ValueError("q_alpha must match z_hat in length")
        if s.shape != (z.size, z.size):
            raise ValueError("sigma must be square and match z_hat")
        if np.max(np.abs(s - s.T), initial=0.0) > 1e-10:
            raise ValueError("sigma must be symmetric (tolerance 1e-10)")
        if np.any(q < 0):
            raise ValueError("q_alpha must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.budget_constraint and z.size < 2:
            raise ValueError("budget constraint requires at least two assets")
        object.__setattr__(self, "z_hat", z)
        object.__setattr__(self, "q_alpha", q)
        object.__setattr__(self, "sigma", s)


@dataclass
class Weights:
    omega: np.ndarray
    objective: float = float("nan")
    iterations: int = 0
    kkt_residual: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.omega != 0.0)

    def to_dict(self) -> dict:
        return {
            "omega": self.omega.tolist(),
            "objective": self.objective,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "active_set": self.active_set.tolist(),
            "diagnostics": self.diagnostics,
        }


def _solve_pd(sigma: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(sigma, lower=True), rhs)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance matrix is not positive definite") from None


def mv_weights(z_hat: np.ndarray, sigma: np.ndarray, gamma: float) -> Weights:
    """Classic mean-variance solution omega = Sigma^{-1} z_hat / gamma."""
    z = np.asarray(z_hat, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    omega = _solve_pd(s, z) / gamma
    obj = float(omega @ z - 0.5 * gamma * omega @ s @ omega)
    return Weights(omega=omega, objective=obj, iterations=0, kkt_residual=0.0)


def soft_threshold_weight(z_hat: float, q_alpha: float, sigma2: float, gamma: float) -> float:
    """Single-asset uncertainty-averse weight: the mean-variance weight soft
    thresholded at q_alpha / (gamma * sigma2)."""
    if sigma2 <= 0 or gamma <= 0:
        raise ValueError("sigma2 and gamma must be positive")
    if q_alpha < 0:
        raise ValueError("q_alpha must be non-negative")
    w_mv = z_hat / (gamma * sigma2)
    lam = q_alpha / (gamma * sigma2)
    return float(np.sign(w_mv) * max(abs(w_mv) - lam, 0.0))


def _ua_objective(omega, z, q, sigma, gamma):
    return float(0.5 * gamma * omega @ sigma @ omega - omega @ z + q @ np.abs(omega))


def _ua_kkt_residual(omega, z, q, sigma, gamma):
    grad = gamma * (sigma @ omega) - z
    res = 0.0
    for i in range(len(omega)):
        if omega[i] != 0.0:
            res = max(res, abs(grad[i] + q[i] * np.sign(omega[i])))
        else:
            res = max(res, max(abs(grad[i]) - q[i], 0.0))
    return res


def _coordinate_descent(z, q, sigma, gamma, omega0=None):
    """Cyclic coordinate descent with exact per-coordinate soft-threshold
    updates; returns (omega, sweeps)."""
    R = len(z)
    diag = gamma * np.diag(sigma)
    if np.any(diag <= 0):
        raise NumericalError("sigma has a non-positive diagonal entry")
    omega = np.zeros(R) if omega0 is None else omega0.copy()
    s_omega = sigma @ omega
    for sweep in range(1, _CD_MAX_SWEEPS + 1):
        delta_max = 0.0
        for i in range(R):
            rho = z[i] - gamma * (s_omega[i] - sigma[i, i] * omega[i])
            new = np.sign(rho) * max(abs(rho) - q[i], 0.0) / diag[i]
            change = new - omega[i]
            if change != 0.0:
                s_omega += sigma[:, i] * change
                omega[i] = new
                delta_max = max(delta_max, abs(change))
        if delta_max < _CD_TOL:
            return omega, sweep
    return omega, _CD_MAX_SWEEPS


def ua_weights(problem: UaProblem) -> Weights:
    """Solve the uncertainty-averse problem

        min (gamma/2) w' Sigma w - w' z_hat + sum_i q_alpha_i |w_i|

    by coordinate descent; with budget_constraint=True the full-investment
    equality sum(w) = 1 is enforced through bisection on its multiplier."""
    z, q, sigma, gamma = problem.z_hat, problem.q_alpha, problem.sigma, problem.gamma
    if not problem.budget_constraint:
        omega, sweeps = _coordinate_descent(z, q, sigma, gamma)
        kkt = _ua_kkt_residual(omega, z, q, sigma, gamma)
        if kkt > _KKT_TOL:
            raise NumericalError(
                f"coordinate descent did not converge: KKT residual {kkt:.3e} "
                f"after {sweeps} sweeps"
            )
        return Weights(omega=omega, objective=_ua_objective(omega, z, q, sigma, gamma),
                       iterations=sweeps, kkt_residual=kkt)

    # Equality-constrained variant: solve min f(w) - nu * (sum w - 1) and
    # bisect on nu; sum(w(nu)) is continuous and non-decreasing in nu.
    def solve_at(nu, start):
        return _coordinate_descent(z + nu, q, sigma, gamma, omega0=start)

    total_sweeps = 0
    scale = max(1.0, float(np.max(np.abs(z))), float(np.max(q)),
                gamma * float(np.max(np.abs(sigma))))
    lo, hi = -scale, scale
    omega_lo, sw = solve_at(lo, None)
    total_sweeps += sw
    for _ in range(200):
        if omega_lo.sum() <= 1.0:
            break
        lo *= 2.0
        omega_lo, sw = solve_at(lo, omega_lo)
        total_sweeps += sw
    else:
        raise NumericalError("could not bracket the budget multiplier from below")
    omega_hi, sw = solve_at(hi, None)
    total_sweeps += sw
    for _ in range(200):
        if omega_hi.sum() >= 1.0:
            break
        hi *= 2.0
        omega_hi, sw = solve_at(hi, omega_hi)
        total_sweeps += sw
    else:
        raise NumericalError("could not bracket the budget multiplier from above")

    omega = omega_hi
    nu = hi
    for _ in range(200):
        nu = 0.5 * (lo + hi)
        omega, sw = solve_at(nu, omega)
        total_sweeps += sw
        gap = omega.sum() - 1.0
        if abs(gap) <= _BUDGET_TOL:
            break
        if gap > 0:
            hi = nu
        else:
            lo = nu
    else:
        raise NumericalError(
            f"budget bisection did not converge: sum(omega) - 1 = {omega.sum() - 1.0:.3e}"
        )
    kkt = _ua_kkt_residual(omega, z + nu, q, sigma, gamma)
    if kkt > _KKT_TOL:
        raise NumericalError(f"constrained coordinate descent KKT residual {kkt:.3e}")
    return Weights(omega=omega, objective=_ua_objective(omega, z, q, sigma, gamma),
                   iterations=total_sweeps, kkt_residual=kkt,
                   diagnostics={"budget_multiplier": nu})


def two_asset_no_riskfree(z_hat, q_alpha, sigma, gamma: float) -> Weights:
    """Closed-form uncertainty-averse allocation between two risky assets
    under full investment (omega_1 + omega_2 = 1).

    The solution is piecewise linear in the budget-constrained mean-variance
    weight with breakpoints A < B < C driven by the uncertainty quantiles;
    exactly one of five branches applies to any instance.
    """
    z = np.asarray(z_hat, dtype=float)
    q = np.asarray(q_alpha, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if z.shape != (2,) or q.shape != (2,) or s.shape != (2, 2):
        raise ValueError("two_asset_no_riskfree expects 2-asset inputs")
    if np.any(q < 0) or gamma <= 0:
        raise ValueError("q_alpha must be non-negative and gamma positive")
    var_diff = s[0, 0] + s[1, 1] - 2.0 * s[0, 1]
    if var_diff <= 0:
        raise NumericalError("Var(z_1 - z_2) must be positive")
    c0 = 1.0 / (gamma * var_diff)
    w1_mv = c0 * (z[0] - z[1] - gamma * (s[0, 1] - s[1, 1]))
    A = w1_mv - c0 * (q[0] + q[1])
    B = w1_mv - c0 * (q[0] - q[1])
    C = w1_mv + c0 * (q[0] + q[1])
    if A > 1.0:
        w1, branch = A, "short_asset_2"
    elif B > 1.0:
        w1, branch = 1.0, "all_in_asset_1"
    elif B > 0.0:
        w1, branch = B, "interior"
    elif C > 0.0:
        w1, branch = 0.0, "non_participation_asset_1"
    else:
        w1, branch = C, "short_asset_1"
    omega = np.array([w1, 1.0 - w1])
    obj = float(omega @ z - q @ np.abs(omega) - 0.5 * gamma * omega @ s @ omega)
    return Weights(omega=omega, objective=obj, iterations=0, kkt_residual=0.0,
                   diagnostics={"branch": branch, "w1_mv": w1_mv, "c0": c0})


@dataclass(frozen=True)
class RsProblem:
    """Risk-sensitive double-shrinkage instance: normal prior N(pi, g*Sigma_T)
    on the expected return, forecast sampling covariance fse2."""

    z_hat: np.ndarray
    fse2: np.ndarray
    prior_mean: np.ndarray
    prior_scale: float
    sigma: np.ndarray
    gamma: float
    tau: float

    def __post_init__(self):
        z = np.asarray(self.z_hat, dtype=float)
        fse2 = np.asarray(self.fse2, dtype=float)
        pi = np.asarray(self.prior_mean, dtype=float)
        s = np.asarray(self.sigma, dtype=float)
        R = z.size
        if fse2.shape != (R, R) or s.shape != (R, R) or pi.shape != (R,):
            raise ValueError("inconsistent shapes in RsProblem")
        if self.prior_scale <= 0 or self.gamma <= 0 or self.tau <= 0:
            raise ValueError("prior_scale, gamma and tau must be positive")
        object.__setattr__(self, "z_hat", z)
        object.__setattr__(self, "fse2", fse2)
        object.__setattr__(self, "prior_mean", pi)
        object.__setattr__(self, "sigma", s)


def rs_weights(problem: RsProblem) -> Weights:
    """Posterior-then-maximize solution of the risk-sensitive problem.

    The posterior predictive mean blends the forecast toward the prior with
    weight W1 = SE^2 (SE^2 + v)^{-1}, v = prior_scale * Sigma_T; the weight
    vector is Sigma_tilde^{-1} z_tilde / (tau + gamma), which both shrinks
    toward the prior-based portfolio and scales the whole position down.
    """
    v = problem.prior_scale * problem.sigma
    S = problem.fse2 + v
    R = len(problem.z_hat)
    try:
        w1 = np.linalg.solve(S.T, problem.fse2.T).T       # SE^2 (SE^2 + v)^{-1}
    except np.linalg.LinAlgError:
        raise NumericalError("SE^2 + v is singular") from None
    z_tilde = (np.eye(R) - w1) @ problem.z_hat + w1 @ problem.prior_mean
    sigma_tilde = problem.sigma + v @ w1.T
    try:
        omega = np.linalg.solve(sigma_tilde, z_tilde) / (problem.tau + problem.gamma)
    except np.linalg.LinAlgError:
        raise NumericalError("posterior covariance is singular") from None
    return Weights(omega=omega, objective=float("nan"), iterations=0, kkt_residual=0.0,
                   diagnostics={"z_tilde": z_tilde.tolist()})


def gmvp_weights(sigma: np.ndarray) -> Weights:
    """Global minimum-variance portfolio Sigma^{-1} 1 / (1' Sigma^{-1} 1)."""
    s = np.asarray(sigma, dtype=float)
    ones = np.ones(s.shape[0])
    raw = _solve_pd(s, ones)
    omega = raw / (ones @ raw)
    return Weights(omega=omega, objective=float(omega @ s @ omega),
                   iterations=0, kkt_residual=0.0)


def estimate_covariance(returns: np.ndarray, shrinkage="auto") -> np.ndarray:
    """Linear shrinkage of the sample covariance toward the scaled identity:
    (1 - delta) S + delta (trace(S)/R) I.

    shrinkage="auto" picks delta by the standard identity-target intensity
    (Ledoit-Wolf): delta = min(1, b^2 / d^2) with d^2 the squared distance of
    S from the target and b^2 the averaged squared sampling error, both in
    the normalized Frobenius norm.
    """
    X = np.asarray(returns, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("returns must be a (T, R) matrix with T >= 2")
    T, R = X.shape
    Xc = X - X.mean(axis=0)
    S = (Xc.T @ Xc) / T
    mu = np.trace(S) / R
    if shrinkage == "auto":
        d2 = np.sum((S - mu * np.eye(R)) ** 2) / R
        if d2 <= 0:
            delta = 1.0
        else:
            b_bar2 = 0.0
            for t in range(T):
                dev = np.outer(Xc[t], Xc[t]) - S
                b_bar2 += np.sum(dev * dev)
            b_bar2 /= (T * T * R)
            delta = float(min(1.0, b_bar2 / d2))
    else:
        delta = float(shrinkage)
        if not 0.0 <= delta <= 1.0:
            raise ValueError("shrinkage must be in [0, 1] or 'auto'")
    out = (1.0 - delta) * S + delta * mu * np.eye(R)
    if delta == 0.0:
        try:
            np.linalg.cholesky(out)
        except np.linalg.LinAlgError:
            raise NumericalError(
                "sample covariance is singular and shrinkage is 0"
            ) from None
    return out


def confidence_to_q(se, level: float, n_assets: int | None = None):
    """Map a forecast standard error to the uncertainty quantile
    q = eps_level * se; n_assets applies a Bonferroni correction by dividing
    the tail mass over that many tests."""
    se_arr = np.asarray(se, dtype=float)
    if np.any(se_arr < 0):
        raise ValueError("se must be non-negative")
    eff = level if n_assets is None else 1.0 - (1.0 - level) / n_assets
    q = critical_value(eff) * se_arr
    return float(q) if np.isscalar(se) or se_arr.ndim == 0 else q
