"""Monte Carlo data-generating process and coverage experiment.

Returns follow a conditional three-factor model: characteristics evolve as
AR(1) per asset and are rank-normalized cross-sectionally each period; the
factor loadings are known nonlinear functions of the lagged characteristics
(a two-characteristic interaction, the mean square of all characteristics,
and their median); factors are i.i.d. multivariate normal; idiosyncratic
noise is heteroskedastic with a scale calibrated so that the median
idiosyncratic variance share hits a target. The coverage experiment trains
the network per replication, builds analytic and bootstrap confidence
intervals for the equal-weighted expected-return forecast, and reports
t-statistic moments, empirical coverage, and normality diagnostics.
"""

from __future__ import annotations

import json
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import kstest

from . import bootstrap as bs
from . import fourier, nn
from .errors import NumericalError
from .panel import Panel

# FF3-like monthly factor moments (illustrative calibration; market, size,
# value). Means and volatilities are in monthly decimal units.
_FACTOR_SD = np.array([0.028, 0.021, 0.022])
_FACTOR_CORR = np.array([
    [1.00, 0.25, 0.05],
    [0.25, 1.00, 0.10],
    [0.05, 0.10, 1.00],
])
DEFAULT_FACTOR_MEAN = np.array([0.009, 0.000, -0.003])
DEFAULT_FACTOR_COV = _FACTOR_CORR * np.outer(_FACTOR_SD, _FACTOR_SD)


@dataclass(frozen=True)
class SimConfig:
    n_assets: int
    n_periods: int
    n_features: int
    ar_coef: float = 0.7
    innovation_scale: float = 0.5
    factor_mean: tuple = tuple(DEFAULT_FACTOR_MEAN)
    factor_cov: tuple = tuple(map(tuple, DEFAULT_FACTOR_COV))
    target_idio_share: float = 0.5
    s_range: tuple = (0.1, 0.9)
    seed: int = 0

    def __post_init__(self):
        if self.n_assets < 2:
            raise ValueError("need at least 2 assets")
        if self.n_periods < 2:
            raise ValueError("need at least 2 periods")
        if self.n_features < 2:
            raise ValueError("need at least 2 characteristics (the interaction "
                             "loading uses the first two)")
        if not 0.0 < self.target_idio_share < 1.0:
            raise ValueError("target_idio_share must be in (0, 1)")
        if abs(self.ar_coef) >= 1.0:
            raise ValueError("ar_coef must be inside the unit circle")
        mean = np.asarray(self.factor_mean, dtype=float)
        cov = np.asarray(self.factor_cov, dtype=float)
        if mean.shape != (3,) or cov.shape != (3, 3):
            raise ValueError("factor_mean must be length 3 and factor_cov 3x3")
        eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if eig.min() < -1e-12:
            raise ValueError("factor_cov must be positive semidefinite")
        object.__setattr__(self, "factor_mean", tuple(mean))
        object.__setattr__(self, "factor_cov", tuple(map(tuple, cov)))

    @property
    def factor_mean_array(self) -> np.ndarray:
        return np.asarray(self.factor_mean, dtype=float)

    @property
    def factor_cov_array(self) -> np.ndarray:
        return np.asarray(self.factor_cov, dtype=float)


def _gen_latent(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """AR(1) latent characteristics, shape (N, T+1, d), initialized from the
    stationary distribution."""
    N, T, d = cfg.n_assets, cfg.n_periods, cfg.n_features
    rho, scale = cfg.ar_coef, cfg.innovation_scale
    stat_sd = scale / np.sqrt(1.0 - rho * rho)
    latent = np.empty((N, T + 1, d))
    latent[:, 0, :] = stat_sd * rng.standard_normal((N, d))
    eps = rng.standard_normal((N, T, d))
    for t in range(1, T + 1):
        latent[:, t, :] = rho * latent[:, t - 1, :] + scale * eps[:, t - 1, :]
    return latent


def _rank_normalize(latent: np.ndarray) -> np.ndarray:
    """Map each (t, k) cross section to ranks {1/N, ..., 1}; ties broken by
    asset index."""
    N = latent.shape[0]
    order = np.argsort(latent, axis=0, kind="stable")
    ranks = np.empty_like(latent)
    grid = np.broadcast_to(np.arange(1, N + 1, dtype=float)[:, None, None], latent.shape)
    np.put_along_axis(ranks, order, grid, axis=0)
    return ranks / N


def gen_characteristics(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Observed characteristics x[i, t, k] for t = 0..T, rank-normalized per
    cross section."""
    return _rank_normalize(_gen_latent(cfg, rng))


def beta_functions(x: np.ndarray) -> np.ndarray:
    """Factor loadings from characteristics: (x_1 * x_2, mean of x_k^2,
    median of x); works on any (..., d) array and returns (..., 3)."""
    x = np.asarray(x, dtype=float)
    return np.stack(
        [x[..., 0] * x[..., 1], np.mean(x * x, axis=-1), np.median(x, axis=-1)],
        axis=-1,
    )


@dataclass
class SimPanel:
    panel: Panel
    true_expected_returns: np.ndarray   # (N,) conditional means at T+1
    factors: np.ndarray                 # (T, 3)
    betas: np.ndarray                   # (N, T, 3) loadings at each (i, t)
    idiosyncratic: np.ndarray           # (N, T)
    s: np.ndarray                       # (N,) idio scale draws
    sigma: float                        # calibrated common idio scale
    achieved_idio_share: float

    def reconstruct_returns(self) -> np.ndarray:
        return np.einsum("itk,tk->it", self.betas, self.factors) + self.idiosyncratic


def _calibrate_sigma(s: np.ndarray, factor_var: np.ndarray, target: float,
                     tol: float = 0.01, max_steps: int = 100) -> float:
    """Bisect the common idio scale so that the median over assets of
    s_i^2 sigma^2 / (factor_var_i + s_i^2 sigma^2) hits the target share."""
    s2 = s * s

    def share(sig):
        idio = s2 * sig * sig
        return float(np.median(idio / (factor_var + idio)))

    lo, hi = 0.0, 1.0
    for _ in range(60):
        if share(hi) >= target:
            break
        hi *= 2.0
    else:
        raise NumericalError("could not bracket the idiosyncratic scale")
    for step in range(max_steps):
        mid = 0.5 * (lo + hi)
        val = share(mid)
        if abs(val - target) <= tol:
            return mid
        if val < target:
            lo = mid
        else:
            hi = mid
    raise NumericalError(f"idiosyncratic-share calibration failed after {max_steps} "
                         "bisection steps")


def gen_returns(cfg: SimConfig, characteristics: np.ndarray,
                rng: np.random.Generator) -> SimPanel:
    """Generate factors, idiosyncratic noise, and returns from the
    characteristics tensor (N, T+1, d)."""
    x = np.asarray(characteristics, dtype=float)
    N, Tp1, d = x.shape
    T = Tp1 - 1
    if N != cfg.n_assets or T != cfg.n_periods or d != cfg.n_features:
        raise ValueError("characteristics tensor does not match the config")
    lam = cfg.factor_mean_array
    cov = cfg.factor_cov_array
    betas = beta_functions(x[:, :T, :])                   # loadings at t-1
    factors = rng.multivariate_normal(lam, cov, size=T)  # svd method: PSD allowed
    common = np.einsum("itk,tk->it", betas, factors)      # (N, T)
    s = rng.uniform(cfg.s_range[0], cfg.s_range[1], size=N)
    noise = rng.standard_normal((N, T))

    factor_var = common.var(axis=1, ddof=1)
    eps = np.finfo(float).tiny
    if np.all(factor_var < eps) or cfg.s_range[1] == 0.0:
        # degenerate edges (no factor variation, or no idio noise requested):
        # skip calibration rather than bisecting an unattainable share
        sigma = 0.0
        achieved = 0.0
    else:
        sigma = _calibrate_sigma(s, factor_var, cfg.target_idio_share)
        idio_var = s * s * sigma * sigma
        achieved = float(np.median(idio_var / (factor_var + idio_var)))
    idio = (s * sigma)[:, None] * noise
    returns = common + idio
    panel = Panel(returns=returns, features=x[:, :T, :], latest_features=x[:, T, :])
    true_mu = beta_functions(x[:, T, :]) @ lam
    return SimPanel(
        panel=panel,
        true_expected_returns=true_mu,
        factors=factors,
        betas=betas,
        idiosyncratic=idio,
        s=s,
        sigma=sigma,
        achieved_idio_share=achieved,
    )


def population_se(fit: fourier.OlsFit, basis: fourier.FourierBasis, panel: Panel,
                  weights: np.ndarray, x_latest: np.ndarray, betas: np.ndarray,
                  factor_cov: np.ndarray) -> float:
    """Infeasible standard error using the true loadings and factor
    covariance instead of the fitted residuals (for oracle checks only)."""
    phi_latest = fourier.expand(basis, x_latest)
    H = fit.solve_gram(phi_latest.T @ np.asarray(weights, dtype=float))
    total = 0.0
    for t in range(panel.n_periods):
        phi = fourier.expand(basis, panel.features[:, t, :])
        a = (phi @ H) @ betas[:, t, :]                     # (3,)
        total += float(a @ factor_cov @ a)
    return float(np.sqrt(total))


METHOD_ANALYTIC = "analytic"
METHOD_ORACLE = "oracle"
METHOD_BOOTSTRAP_PREFIX = "bootstrap_"
ALL_METHODS = (
    METHOD_ANALYTIC,
    METHOD_BOOTSTRAP_PREFIX + bs.SCHEME_TIME_CLUSTERED,
    METHOD_BOOTSTRAP_PREFIX + bs.SCHEME_CROSS_SECTIONAL,
    METHOD_BOOTSTRAP_PREFIX + bs.SCHEME_IID,
)


@dataclass
class MethodReport:
    t_stats: np.ndarray
    scales: np.ndarray          # SE or sigma_star per replication
    mean: float
    sd: float
    coverage: dict              # level -> empirical coverage
    ks_distance: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sd": self.sd,
            "coverage": {f"{k:g}": v for k, v in self.coverage.items()},
            "ks_distance": self.ks_distance,
            "mean_scale": float(np.mean(self.scales)),
        }


@dataclass
class CoverageReport:
    methods: dict               # name -> MethodReport
    forecast_errors: np.ndarray # z_hat - z_true per replication (ML path)
    replications: int
    failures: list
    levels: tuple

    def to_dict(self) -> dict:
        return {
            "replications": self.replications,
            "levels": list(self.levels),
            "failures": self.failures,
            "forecast_error_sd": float(np.std(self.forecast_errors, ddof=1))
            if self.forecast_errors.size > 1 else float("nan"),
            "methods": {name: rep.to_dict() for name, rep in self.methods.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _replication_seeds(base_seed: int, rep: int) -> dict:
    root = np.random.SeedSequence([base_seed, rep])
    children = root.spawn(3)
    return {"sim": children[0], "train": children[1], "bootstrap": children[2]}


def run_replication(cfg: SimConfig, rep: int, methods: tuple,
                    arch: nn.MlpArchitecture, nn_cfg: nn.TrainConfig,
                    bs_cfg: bs.BootstrapConfig, fourier_order: int = 3) -> dict:
    """One replication: simulate, train, and compute every requested
    (forecast error, scale) pair. Pure function of (cfg, rep, configs)."""
    seeds = _replication_seeds(cfg.seed, rep)
    rng = np.random.default_rng(seeds["sim"])
    sim = gen_returns(cfg, gen_characteristics(cfg, rng), rng)
    panel = sim.panel
    N = cfg.n_assets
    w = np.full(N, 1.0 / N)
    z_true = float(w @ sim.true_expected_returns)
    out = {"z_true": z_true}

    needs_ml = any(m == METHOD_ANALYTIC or m.startswith(METHOD_BOOTSTRAP_PREFIX)
                   for m in methods)
    needs_fit = METHOD_ANALYTIC in methods or METHOD_ORACLE in methods
    basis = fourier.FourierBasis(order=fourier_order, input_dim=cfg.n_features)
    fit = fourier.fit_ols(panel, basis) if needs_fit else None

    if needs_ml:
        train_seed = int(seeds["train"].generate_state(1)[0])
        model = nn.train(panel, arch, replace(nn_cfg, seed=train_seed))
        z_hat = float(w @ nn.predict(model, panel.latest_features))
        out["z_hat"] = z_hat
        if METHOD_ANALYTIC in methods:
            out[METHOD_ANALYTIC] = fourier.analytic_se(
                fit, basis, panel, w, panel.latest_features).se
        boot_seed = int(seeds["bootstrap"].generate_state(1)[0])
        for m in methods:
            if not m.startswith(METHOD_BOOTSTRAP_PREFIX):
                continue
            scheme = m[len(METHOD_BOOTSTRAP_PREFIX):]
            cfg_b = replace(bs_cfg, scheme=scheme,
                            seed=boot_seed + bs.SCHEMES.index(scheme))
            res = bs.run(panel, model, w, panel.latest_features, nn_cfg, cfg_b)
            out[m] = res.sigma_star

    if METHOD_ORACLE in methods:
        true_errors = panel.returns - np.einsum("itk,k->it", sim.betas,
                                                cfg.factor_mean_array)
        phi_latest = fourier.expand(basis, panel.latest_features)
        H = fit.solve_gram(phi_latest.T @ w)
        delta = 0.0
        for t in range(panel.n_periods):
            phi = fourier.expand(basis, panel.features[:, t, :])
            delta += float((phi @ H) @ true_errors[:, t])
        out["oracle_error"] = delta
        out[METHOD_ORACLE] = population_se(fit, basis, panel, w,
                                           panel.latest_features, sim.betas,
                                           cfg.factor_cov_array)
    return out


def _worker(args):
    cfg, rep, methods, arch, nn_cfg, bs_cfg, fourier_order = args
    try:
        return rep, run_replication(cfg, rep, methods, arch, nn_cfg, bs_cfg,
                                    fourier_order), None
    except Exception as exc:  # noqa: BLE001 - failures are collected per seed
        return rep, None, f"{type(exc).__name__}: {exc}"


def coverage_experiment(cfg: SimConfig, replications: int, methods: tuple,
                        arch: nn.MlpArchitecture, nn_cfg: nn.TrainConfig,
                        bs_cfg: bs.BootstrapConfig, fourier_order: int = 3,
                        levels: tuple = (0.90, 0.95, 0.99),
                        n_jobs: int = 1) -> CoverageReport:
    """Replicate the DGP, compute t-statistics for each requested method, and
    summarize coverage and normality.

    Replication r is keyed by SeedSequence([cfg.seed, r]), so results are
    independent of n_jobs and of the order workers finish.
    """
    if replications < 2:
        raise ValueError("need at least 2 replications")
    for m in methods:
        if m not in (*ALL_METHODS, METHOD_ORACLE):
            raise ValueError(f"unknown method {m!r}")
    tasks = [(cfg, r, tuple(methods), arch, nn_cfg, bs_cfg, fourier_order)
             for r in range(replications)]
    if n_jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=n_jobs, mp_context=ctx) as pool:
            results = list(pool.map(_worker, tasks))
    else:
        results = [_worker(t) for t in tasks]

    failures = [{"replication": rep, "error": err} for rep, _, err in results
                if err is not None]
    if len(failures) > 0.01 * replications:
        raise NumericalError(
            f"{len(failures)} of {replications} replications failed: {failures[:5]}"
        )
    rows = [payload for _, payload, err in results if err is None]

    reports = {}
    crit = {lv: fourier.critical_value(lv) for lv in levels}
    for m in methods:
        t_list, scale_list = [], []
        for row in rows:
            if m == METHOD_ORACLE:
                err_val = row["oracle_error"]
            else:
                err_val = row["z_hat"] - row["z_true"]
            scale = row[m]
            t_list.append(err_val / scale)
            scale_list.append(scale)
        t = np.asarray(t_list)
        coverage = {lv: float(np.mean(np.abs(t) <= crit[lv])) for lv in levels}
        reports[m] = MethodReport(
            t_stats=t,
            scales=np.asarray(scale_list),
            mean=float(t.mean()),
            sd=float(t.std(ddof=1)),
            coverage=coverage,
            ks_distance=float(kstest(t, "norm").statistic),
        )
    fe = np.asarray([row["z_hat"] - row["z_true"] for row in rows
                     if "z_hat" in row])
    return CoverageReport(methods=reports, forecast_errors=fe,
                          replications=replications, failures=failures,
                          levels=tuple(levels))
