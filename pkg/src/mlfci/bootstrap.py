"""k-step wild bootstrap for the forecast distribution.

Each replicate rescales the fitted residuals by draws eta and rebuilds
returns as y* = g_hat(x) + e_hat * eta, then warm-starts the trained network
for k more epochs on the resampled panel and re-predicts. The correct scheme
draws one eta per time period (shared across assets, preserving the
cross-sectional dependence that drives forecast uncertainty); the two
deliberately wrong schemes (one eta per asset, or fully independent draws)
are included for falsification experiments.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
import multiprocessing

import numpy as np
from scipy.stats import norm

from . import nn
from .errors import NumericalError
from .panel import Panel

SCHEME_TIME_CLUSTERED = "time_clustered"
SCHEME_CROSS_SECTIONAL = "cross_sectional"
SCHEME_IID = "iid"
SCHEMES = (SCHEME_TIME_CLUSTERED, SCHEME_CROSS_SECTIONAL, SCHEME_IID)

_NORMAL_IQR = float(norm.ppf(0.75) - norm.ppf(0.25))


@dataclass(frozen=True)
class BootstrapConfig:
    n_replicates: int = 100
    k_epochs: int = 10
    scheme: str = SCHEME_TIME_CLUSTERED
    seed: int = 0
    alpha: float = 0.05
    batch_size: int | None = None   # overrides the training batch size for the k epochs

    def __post_init__(self):
        if self.n_replicates < 2:
            raise ValueError("need at least 2 bootstrap replicates")
        if self.k_epochs < 1:
            raise ValueError("k_epochs must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")


def quantile(sample: np.ndarray, p: float) -> float:
    """Order-statistic quantile with linear interpolation between closest
    ranks (the type-7 convention)."""
    x = np.asarray(sample, dtype=float)
    if x.size == 0:
        raise ValueError("cannot take a quantile of an empty sample")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    return float(np.quantile(x, p, method="linear"))


def _resample_eta(shape, scheme, rng):
    """Multiplier grid eta[i, t]: shared per period (time_clustered), per
    asset (cross_sectional), or fully independent (iid)."""
    N, T = shape
    if scheme == SCHEME_TIME_CLUSTERED:
        return np.broadcast_to(rng.standard_normal(T)[None, :], shape)
    if scheme == SCHEME_CROSS_SECTIONAL:
        return np.broadcast_to(rng.standard_normal(N)[:, None], shape)
    return rng.standard_normal(shape)


def _resampled_returns(fitted, residuals, scheme, rng):
    return fitted + residuals * _resample_eta(fitted.shape, scheme, rng)


def _fitted_matrix(panel: Panel, model: nn.MlpModel) -> np.ndarray:
    fitted = np.full(panel.returns.shape, np.nan)
    for t in range(panel.n_periods):
        live = panel.mask[:, t]
        if live.any():
            fitted[live, t] = nn.predict(model, panel.features[live, t, :])
    return fitted


def resample(panel: Panel, model: nn.MlpModel, scheme: str,
             rng: np.random.Generator) -> Panel:
    """One wild-bootstrap resample of the panel's returns; features unchanged."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if panel.n_features != model.architecture.input_dim:
        raise ValueError("panel and model dimensions do not match")
    fitted = _fitted_matrix(panel, model)
    residuals = panel.returns - fitted
    return panel.with_returns(_resampled_returns(fitted, residuals, scheme, rng))


@dataclass
class BootstrapResult:
    replicate_forecasts: np.ndarray     # (B,) weighted forecast per replicate
    point_forecast: float
    q_alpha: float
    sigma_star: float
    interval: tuple
    alpha: float
    scheme: str

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "alpha": self.alpha,
            "point_forecast": self.point_forecast,
            "q_alpha": self.q_alpha,
            "sigma_star": self.sigma_star,
            "interval": list(self.interval),
            "replicate_forecasts": self.replicate_forecasts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# Replicates are advanced in fixed-size groups of stacked trajectories. The
# group size is a pure function of B, never of the worker count, so results
# are identical regardless of how the groups are scheduled.
_GROUP_SIZE = 16


def _replicate_groups(n_replicates: int):
    return [range(start, min(start + _GROUP_SIZE, n_replicates))
            for start in range(0, n_replicates, _GROUP_SIZE)]


def _run_group(panel, model, fitted_pooled, resid_pooled, X, x_latest,
               nn_cfg, bs_cfg, group) -> np.ndarray:
    """Advance one group of replicates and return their (|group|, R)
    predictions on x_latest."""
    maskT = panel.mask.T
    shape = panel.returns.shape
    targets = np.empty((len(group), len(fitted_pooled)))
    rngs = []
    for row, b in enumerate(group):
        rng = np.random.default_rng(bs_cfg.seed ^ (b + 1))
        eta_full = _resample_eta(shape, bs_cfg.scheme, rng)
        targets[row] = fitted_pooled + resid_pooled * eta_full.T[maskT]
        rngs.append(rng)
    cfg = nn_cfg if bs_cfg.batch_size is None else replace(nn_cfg, batch_size=bs_cfg.batch_size)
    stacked_w, stacked_b = nn.batched_continue_training(model, X, targets,
                                                        bs_cfg.k_epochs, cfg, rngs)
    preds = nn.batched_predict(stacked_w, stacked_b, x_latest)
    if not np.all(np.isfinite(preds)):
        bad = int(np.flatnonzero(~np.isfinite(preds).all(axis=1))[0])
        b = group[bad]
        raise NumericalError(
            f"bootstrap replicate {b} (seed {bs_cfg.seed ^ (b + 1)}) produced a "
            "non-finite forecast"
        )
    return preds


def _group_worker(args):
    return _run_group(*args)


def replicate_predictions(panel: Panel, model: nn.MlpModel, x_latest: np.ndarray,
                          nn_cfg: nn.TrainConfig, bs_cfg: BootstrapConfig,
                          n_jobs: int = 1) -> np.ndarray:
    """(B, R) matrix of re-predicted values, one row per replicate.

    Replicate b is a pure function of (inputs, seed ^ (b+1)); rows are
    collected in replicate order, so the output does not depend on n_jobs.
    """
    x_latest = np.atleast_2d(np.asarray(x_latest, dtype=float))
    if panel.n_features != model.architecture.input_dim:
        raise ValueError("panel and model dimensions do not match")
    X, _ = panel.pooled()
    fitted = _fitted_matrix(panel, model)
    maskT = panel.mask.T
    fitted_pooled = fitted.T[maskT]
    resid_pooled = (panel.returns - fitted).T[maskT]
    groups = _replicate_groups(bs_cfg.n_replicates)
    if n_jobs > 1 and len(groups) > 1:
        ctx = multiprocessing.get_context("spawn")
        tasks = [(panel, model, fitted_pooled, resid_pooled, X, x_latest,
                  nn_cfg, bs_cfg, g) for g in groups]
        with ProcessPoolExecutor(max_workers=n_jobs, mp_context=ctx) as pool:
            blocks = list(pool.map(_group_worker, tasks))
    else:
        blocks = [_run_group(panel, model, fitted_pooled, resid_pooled, X,
                             x_latest, nn_cfg, bs_cfg, g) for g in groups]
    return np.vstack(blocks)


def run(panel: Panel, model: nn.MlpModel, weights: np.ndarray, x_latest: np.ndarray,
        nn_cfg: nn.TrainConfig, bs_cfg: BootstrapConfig, n_jobs: int = 1) -> BootstrapResult:
    """Full k-step bootstrap of the weighted forecast W' g(x_latest).

    q_alpha is the (1 - alpha) quantile of |forecast_b - forecast|, giving the
    symmetric interval [forecast - q_alpha, forecast + q_alpha]; sigma_star is
    the bootstrap interquartile range divided by the standard-normal IQR.
    """
    W = np.asarray(weights, dtype=float)
    x_latest = np.atleast_2d(np.asarray(x_latest, dtype=float))
    if W.shape[0] != x_latest.shape[0]:
        raise ValueError("weights and forecast features must have matching length")
    point = float(W @ nn.predict(model, x_latest))
    preds = replicate_predictions(panel, model, x_latest, nn_cfg, bs_cfg, n_jobs=n_jobs)
    forecasts = preds @ W
    centered = forecasts - point
    q = quantile(np.abs(centered), 1.0 - bs_cfg.alpha)
    sigma_star = (quantile(centered, 0.75) - quantile(centered, 0.25)) / _NORMAL_IQR
    return BootstrapResult(
        replicate_forecasts=forecasts,
        point_forecast=point,
        q_alpha=q,
        sigma_star=sigma_star,
        interval=(point - q, point + q),
        alpha=bs_cfg.alpha,
        scheme=bs_cfg.scheme,
    )


def per_asset_sigma_star(panel: Panel, model: nn.MlpModel, x_latest: np.ndarray,
                         nn_cfg: nn.TrainConfig, bs_cfg: BootstrapConfig,
                         n_jobs: int = 1) -> np.ndarray:
    """sigma_star for each individual asset forecast, from one shared set of
    replicates (used by the backtest's per-asset confidence scaling)."""
    x_latest = np.atleast_2d(np.asarray(x_latest, dtype=float))
    preds = replicate_predictions(panel, model, x_latest, nn_cfg, bs_cfg, n_jobs=n_jobs)
    centered = preds - nn.predict(model, x_latest)[None, :]
    hi = np.quantile(centered, 0.75, axis=0, method="linear")
    lo = np.quantile(centered, 0.25, axis=0, method="linear")
    return (hi - lo) / _NORMAL_IQR
