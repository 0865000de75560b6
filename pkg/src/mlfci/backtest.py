"""Rolling-window backtest: panel ingestion, expanding-window training with
validation-based ridge selection, per-month strategy weights, and performance
reporting.

Timing convention: the decision for return month m is made at the end of
month m-1, so predictions use characteristics dated m-1 and every estimation
window (training, standard errors, covariance, realized-return tests) ends at
month m-1. Panel columns already pair x_{m-1} with y_m, which makes the rule
"only columns strictly before the current one" and it is asserted as such.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.stats import norm

from . import bootstrap as bs
from . import fourier, nn, portfolio, selection
from .errors import DataError
from .panel import Panel

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


def month_to_index(month: str) -> int:
    m = _MONTH_RE.match(str(month))
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise DataError(f"month {month!r} is not in YYYY-MM format")
    return int(m.group(1)) * 12 + int(m.group(2)) - 1


def index_to_month(idx: int) -> str:
    return f"{idx // 12:04d}-{idx % 12 + 1:02d}"


def shift_month(month: str, k: int) -> str:
    return index_to_month(month_to_index(month) + k)


def load_panel(path, feature_columns=None) -> Panel:
    """Read a long-format CSV (asset_id, month, excess_return, characteristics)
    into a rectangular Panel.

    Characteristics are rank-normalized to (0, 1] within each month over the
    assets present; missing characteristic cells are imputed to the median
    rank 0.5 (counted and reported as a warning). Rows with a missing return
    are dropped. The panel's months must be contiguous.
    """
    try:
        table = pd.read_csv(path, dtype={"asset_id": str, "month": str})
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"could not read panel CSV {path}: {exc}") from None
    required = ["asset_id", "month", "excess_return"]
    missing = [c for c in required if c not in table.columns]
    if missing:
        raise DataError(f"panel CSV is missing required columns {missing}")
    if feature_columns is None:
        feature_columns = [c for c in table.columns if c not in required]
    else:
        absent = [c for c in feature_columns if c not in table.columns]
        if absent:
            raise DataError(f"panel CSV is missing characteristic columns {absent}")
    if not feature_columns:
        raise DataError("panel CSV has no characteristic columns")

    dupes = table.duplicated(subset=["asset_id", "month"])
    if dupes.any():
        first = table.loc[dupes.idxmax()]
        raise DataError(
            f"duplicate (asset_id, month) key: ({first['asset_id']}, {first['month']})"
        )
    table = table[np.isfinite(table["excess_return"].astype(float))]
    if table.empty:
        raise DataError("panel CSV has no rows with a finite excess_return")

    month_idx = table["month"].map(month_to_index).to_numpy()
    lo, hi = int(month_idx.min()), int(month_idx.max())
    present = np.unique(month_idx)
    if len(present) != hi - lo + 1:
        gaps = sorted(set(range(lo, hi + 1)) - set(present.tolist()))
        raise DataError(
            f"panel months are not contiguous; first gap at {index_to_month(gaps[0])}"
        )
    months = [index_to_month(i) for i in range(lo, hi + 1)]
    assets = sorted(table["asset_id"].unique())
    asset_pos = {a: i for i, a in enumerate(assets)}

    n_assets, n_months, d = len(assets), len(months), len(feature_columns)
    returns = np.full((n_assets, n_months), np.nan)
    ranks = np.full((n_assets, n_months, d), np.nan)
    imputed = 0
    rows = table[["asset_id"]].to_numpy().ravel()
    row_asset = np.array([asset_pos[a] for a in rows])
    row_month = month_idx - lo
    returns[row_asset, row_month] = table["excess_return"].astype(float).to_numpy()
    raw = table[feature_columns].astype(float).to_numpy()
    for t in range(n_months):
        sel = row_month == t
        if not sel.any():
            continue
        rows_t = row_asset[sel]
        vals = raw[sel]
        n_t = len(rows_t)
        for k in range(d):
            col = vals[:, k]
            ok = np.isfinite(col)
            out = np.full(n_t, 0.5)
            if ok.any():
                order = np.argsort(col[ok], kind="stable")
                r = np.empty(ok.sum())
                r[order] = np.arange(1, ok.sum() + 1) / ok.sum()
                out[ok] = r
            imputed += int((~ok).sum())
            ranks[rows_t, t, k] = out
    if imputed:
        warnings.warn(f"imputed {imputed} missing characteristic cells to rank 0.5",
                      stacklevel=2)

    # pair chars at month j-1 with the return at month j; the first month has
    # no usable prior characteristics
    if n_months < 2:
        raise DataError("panel needs at least two months to form (x, y) pairs")
    panel = Panel(
        returns=returns[:, 1:],
        features=ranks[:, :-1, :],
        latest_features=ranks[:, -1, :],
        asset_ids=tuple(assets),
        months=tuple(months[1:]),
        feature_names=tuple(feature_columns),
    )
    return panel


@dataclass(frozen=True)
class SplitPlan:
    train_start: str
    train_end: str
    test_start: str
    test_end: str
    val_years: int = 10
    retrain_every_months: int = 12

    def __post_init__(self):
        ts, te = month_to_index(self.train_start), month_to_index(self.train_end)
        qs, qe = month_to_index(self.test_start), month_to_index(self.test_end)
        if not ts <= te < qs <= qe:
            raise DataError("plan windows must be chronological and non-overlapping")
        if self.val_years < 1 or self.retrain_every_months < 1:
            raise DataError("val_years and retrain_every_months must be positive")
        if qs - te - 1 != self.val_months:
            raise DataError(
                f"gap between train_end and test_start must equal the validation "
                f"window ({self.val_months} months), got {qs - te - 1}"
            )

    @property
    def val_months(self) -> int:
        return 12 * self.val_years


STRATEGY_NAMES = ("ew", "mve", "gmvp", "ua_25", "ua_50", "ua_75",
                  "fci_fdr", "highest_k", "naive_fdr")


@dataclass(frozen=True)
class BacktestConfig:
    strategies: tuple = STRATEGY_NAMES
    gamma: float = 1.0
    vol_target: float = 0.20            # annualized, applied to MVE and UA
    gmvp_vol_target: float = 0.20       # GMVP uses its own normalizing constant
    ua_levels: tuple = (0.25, 0.50, 0.75)
    fdr_alpha: float = 0.05
    k_portfolio: int = 100
    se_method: str = "analytic"         # analytic | bootstrap | max
    l2_grid: tuple = (1e-5, 1e-3)
    se_window_months: int = 240
    cov_window_months: int = 240
    naive_window_months: int = 240
    shrinkage: object = "auto"
    fourier_order: int = 3
    min_history_months: int = 24
    top_n: int | None = None
    size_column: str | None = None
    min_size_quantile: float | None = None

    def __post_init__(self):
        if self.se_method not in ("analytic", "bootstrap", "max"):
            raise ValueError("se_method must be analytic, bootstrap, or max")
        unknown = set(self.strategies) - set(STRATEGY_NAMES)
        if unknown:
            raise ValueError(f"unknown strategies: {sorted(unknown)}")


@dataclass
class RollingResult:
    months: list
    returns: dict                    # strategy -> np.ndarray over months
    weights: dict                    # strategy -> {month: (asset_ids, omega)}
    zero_fraction: dict              # ua strategy -> np.ndarray over months
    chosen_l2: list                  # (anchor month, lambda) per retraining
    skipped: list                    # (month, reason)


def _pooled_mse(model, panel: Panel, columns) -> float:
    se_sum, count = 0.0, 0
    for t in columns:
        live = panel.mask[:, t]
        if not live.any():
            continue
        err = nn.predict(model, panel.features[live, t, :]) - panel.returns[live, t]
        se_sum += float(err @ err)
        count += live.sum()
    if count == 0:
        raise DataError("validation window has no usable observations")
    return se_sum / count


def _annualized_vol(series: np.ndarray) -> float:
    return float(np.std(series, ddof=1) * math.sqrt(12.0))


def rolling_run(panel: Panel, plan: SplitPlan, cfg: BacktestConfig,
                arch: nn.MlpArchitecture, nn_cfg: nn.TrainConfig,
                bs_cfg: bs.BootstrapConfig | None = None,
                n_jobs: int = 1) -> RollingResult:
    """Run the expanding-window backtest over the plan's test months."""
    if panel.months is None or panel.asset_ids is None:
        raise DataError("rolling_run needs a panel with months and asset ids")
    if cfg.se_method in ("bootstrap", "max") and bs_cfg is None:
        raise ValueError("se_method requires a bootstrap config")
    pos = {m: j for j, m in enumerate(panel.months)}
    for m in (plan.train_start, plan.test_start, plan.test_end):
        if m not in pos:
            raise DataError(f"plan month {m} is outside the panel")
    test_idx = [pos[index_to_month(i)]
                for i in range(month_to_index(plan.test_start),
                               month_to_index(plan.test_end) + 1)]
    asset_ids = np.asarray(panel.asset_ids)

    months_out, skipped = [], []
    returns_out = {s: [] for s in cfg.strategies}
    weights_out = {s: {} for s in cfg.strategies}
    zero_out = {s: [] for s in cfg.strategies if s.startswith("ua_")}
    chosen_l2 = []
    model = None
    ua_by_level = {f"ua_{int(round(level * 100))}": level for level in cfg.ua_levels}

    for step, t in enumerate(test_idx):
        if step % plan.retrain_every_months == 0:
            anchor = t
            val_lo = anchor - plan.val_months
            train_lo = pos[plan.train_start]
            if val_lo <= train_lo:
                raise DataError("validation window overlaps the training start")
            # no look-ahead: all training/validation return months < anchor
            assert panel.months[val_lo] < panel.months[anchor]
            train_panel = panel.subset_periods(train_lo, val_lo)
            best = None
            for lam in cfg.l2_grid:
                candidate = nn.train(train_panel, arch, replace(nn_cfg, l2_penalty=lam))
                val_mse = _pooled_mse(candidate, panel, range(val_lo, anchor))
                if best is None or val_mse < best[0]:
                    best = (val_mse, lam, candidate)
            chosen_l2.append((panel.months[anchor], best[1]))
            model = best[2]

        month = panel.months[t]
        try:
            done = _run_month(panel, cfg, arch, nn_cfg, bs_cfg, n_jobs, model, t,
                              month, ua_by_level, returns_out, weights_out,
                              zero_out, skipped, asset_ids)
        except NumericalError as exc:
            raise NumericalError(f"{month}: {exc}") from exc
        if done:
            months_out.append(month)

    return RollingResult(
        months=months_out,
        returns={s: np.asarray(v) for s, v in returns_out.items()},
        weights=weights_out,
        zero_fraction={s: np.asarray(v) for s, v in zero_out.items()},
        chosen_l2=chosen_l2,
        skipped=skipped,
    )


def _run_month(panel, cfg, arch, nn_cfg, bs_cfg, n_jobs, model, t, month,
               ua_by_level, returns_out, weights_out, zero_out, skipped,
               asset_ids) -> bool:
    """One test month: universe, forecasts, SEs, covariance, strategy weights.
    Returns False when the month is skipped."""
    live = panel.mask[:, t]
    if cfg.min_history_months > 0:
        h_lo = max(0, t - cfg.min_history_months)
        history_count = np.isfinite(panel.returns[:, h_lo:t]).sum(axis=1)
        live = live & (history_count >= min(cfg.min_history_months, t))
    if cfg.size_column is not None:
        k = panel_feature_index(panel, cfg.size_column)
        size_rank = panel.features[:, t, k]
        if cfg.min_size_quantile is not None:
            live = live & (size_rank >= cfg.min_size_quantile)
        if cfg.top_n is not None and live.sum() > cfg.top_n:
            order = np.argsort(-np.where(live, size_rank, -np.inf), kind="stable")
            keep = np.zeros_like(live)
            keep[order[:cfg.top_n]] = True
            live = live & keep
    universe = np.flatnonzero(live)
    if universe.size < 1:
        skipped.append((month, "no eligible assets"))
        return False

    x_now = panel.features[universe, t, :]
    z_hat = nn.predict(model, x_now)
    realized = panel.returns[universe, t]

    se_lo = max(0, t - cfg.se_window_months)
    se_panel = panel.subset_periods(se_lo, t)
    assert se_panel.months[-1] < month
    need_se = any(s in cfg.strategies for s in ("fci_fdr", *ua_by_level))
    se_vec = None
    if need_se:
        if cfg.se_method in ("analytic", "max"):
            basis = fourier.FourierBasis(order=cfg.fourier_order,
                                         input_dim=panel.n_features)
            fit = fourier.fit_ols(se_panel, basis)
            se_vec = fourier.per_asset_analytic_se(fit, basis, se_panel, x_now)
        if cfg.se_method in ("bootstrap", "max"):
            sigma_star = bs.per_asset_sigma_star(se_panel, model, x_now, nn_cfg,
                                                 bs_cfg, n_jobs=n_jobs)
            se_vec = sigma_star if cfg.se_method == "bootstrap" else \
                np.maximum(se_vec, sigma_star)
        se_vec = np.maximum(se_vec, 1e-12)   # selection needs se > 0

    # covariance-based strategies need a complete trailing return window;
    # assets failing that are dropped from those strategies only
    cov_lo = max(0, t - cfg.cov_window_months)
    sigma = window = None
    mve_scale = None
    complete = np.ones(universe.size, dtype=bool)
    if any(s in cfg.strategies for s in ("mve", "gmvp", *ua_by_level)):
        full_window = panel.returns[universe][:, cov_lo:t]
        complete = np.all(np.isfinite(full_window), axis=1)
        cov_universe = universe[complete]
        window = full_window[complete]
        if window.shape[1] < 2 or cov_universe.size < 1:
            skipped.append((month, "covariance window too short"))
            return False
        sigma = portfolio.estimate_covariance(window.T, shrinkage=cfg.shrinkage)
        z_cov = z_hat[complete]
        se_cov = se_vec[complete] if se_vec is not None else None
        realized_cov = panel.returns[cov_universe, t]

        def mv_scale_factor():
            insample = window.T @ portfolio.mv_weights(z_cov, sigma, cfg.gamma).omega
            vol = _annualized_vol(insample)
            return cfg.vol_target / vol if vol > 0 else 1.0

    def record(name, ids, omega, ret):
        returns_out[name].append(ret)
        weights_out[name][month] = (tuple(asset_ids[ids]), omega.copy())

    for name in cfg.strategies:
        if name == "ew":
            omega = np.full(universe.size, 1.0 / universe.size)
            record(name, universe, omega, float(omega @ realized))
        elif name == "mve":
            omega = portfolio.mv_weights(z_cov, sigma, cfg.gamma).omega
            if mve_scale is None:
                mve_scale = mv_scale_factor()
            omega = omega * mve_scale
            record(name, cov_universe, omega, float(omega @ realized_cov))
        elif name == "gmvp":
            omega = portfolio.gmvp_weights(sigma).omega
            vol = _annualized_vol(window.T @ omega)
            omega = omega * (cfg.gmvp_vol_target / vol if vol > 0 else 1.0)
            record(name, cov_universe, omega, float(omega @ realized_cov))
        elif name in ua_by_level:
            q = portfolio.confidence_to_q(se_cov, ua_by_level[name])
            prob = portfolio.UaProblem(z_hat=z_cov, q_alpha=q, sigma=sigma,
                                       gamma=cfg.gamma)
            omega = portfolio.ua_weights(prob).omega
            zero_out[name].append(float(np.mean(omega == 0.0)))
            if mve_scale is None:
                mve_scale = mv_scale_factor()
            omega = omega * mve_scale
            record(name, cov_universe, omega, float(omega @ realized_cov))
        elif name == "fci_fdr":
            res = selection.strategy_fci_fdr(z_hat, se_vec, cfg.fdr_alpha,
                                             cfg.k_portfolio)
            record(name, universe, res.weights, float(res.weights @ realized))
        elif name == "highest_k":
            res = selection.strategy_highest_k(z_hat, cfg.k_portfolio)
            record(name, universe, res.weights, float(res.weights @ realized))
        elif name == "naive_fdr":
            n_lo = max(0, t - cfg.naive_window_months)
            hist = panel.returns[universe][:, n_lo:t]
            testable = np.all(np.isfinite(hist), axis=1) & (hist.shape[1] >= 2)
            weights = np.zeros(universe.size)
            if testable.any():
                res = selection.strategy_naive_fdr(hist[testable].T,
                                                   cfg.fdr_alpha,
                                                   cfg.k_portfolio,
                                                   z_hat[testable])
                weights[np.flatnonzero(testable)] = res.weights
            record(name, universe, weights, float(weights @ realized))
    return True


def panel_feature_index(panel: Panel, name: str) -> int:
    if panel.feature_names is not None and name in panel.feature_names:
        return panel.feature_names.index(name)
    raise DataError(f"panel does not carry a characteristic named {name!r}")


@dataclass
class PerfStats:
    ann_mean: float
    ann_sd: float
    sharpe: float
    sortino: float
    max_drawdown: float
    best_month: float
    worst_month: float
    zero_fraction_min: float | None = None
    zero_fraction_median: float | None = None
    zero_fraction_max: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def perf_stats(returns, zero_fractions=None) -> PerfStats:
    """Annualized summary statistics of a monthly return series.

    ann_mean = 12 * mean, ann_sd = sqrt(12) * sample sd; Sortino uses the
    downside root mean square against a zero target; drawdown is measured on
    compounded wealth. A zero-volatility series gets an infinite Sharpe
    sentinel with the sign of the mean.
    """
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two months of returns")
    ann_mean = 12.0 * float(r.mean())
    ann_sd = float(np.std(r, ddof=1)) * math.sqrt(12.0)
    if ann_sd > 0:
        sharpe = ann_mean / ann_sd
    else:
        sharpe = math.inf if ann_mean > 0 else (-math.inf if ann_mean < 0 else 0.0)
    downside = math.sqrt(float(np.mean(np.minimum(r, 0.0) ** 2)))
    if downside > 0:
        sortino = ann_mean / (math.sqrt(12.0) * downside)
    else:
        sortino = math.inf if ann_mean > 0 else (-math.inf if ann_mean < 0 else 0.0)
    wealth = np.cumprod(1.0 + r)
    peak = np.maximum.accumulate(np.concatenate(([1.0], wealth)))[1:]
    max_dd = float(np.max(1.0 - wealth / peak))
    out = PerfStats(
        ann_mean=ann_mean, ann_sd=ann_sd, sharpe=sharpe, sortino=sortino,
        max_drawdown=max_dd, best_month=float(r.max()), worst_month=float(r.min()),
    )
    if zero_fractions is not None and len(zero_fractions):
        z = np.asarray(zero_fractions, dtype=float)
        out.zero_fraction_min = float(z.min())
        out.zero_fraction_median = float(np.median(z))
        out.zero_fraction_max = float(z.max())
    return out


FACTOR_MODELS = {
    "CAPM": ("mkt_rf",),
    "FF3": ("mkt_rf", "smb", "hml"),
    "FF4": ("mkt_rf", "smb", "hml", "mom"),
    "FF5": ("mkt_rf", "smb", "hml", "rmw", "cma"),
    "FF6": ("mkt_rf", "smb", "hml", "rmw", "cma", "mom"),
    "FF6+": ("mkt_rf", "smb", "hml", "rmw", "cma", "mom", "st_rev"),
}


def load_factor_table(path) -> pd.DataFrame:
    try:
        table = pd.read_csv(path, dtype={"month": str})
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"could not read factor CSV {path}: {exc}") from None
    if "month" not in table.columns:
        raise DataError("factor CSV needs a 'month' column")
    table["month"].map(month_to_index)   # validates format
    if table["month"].duplicated().any():
        raise DataError("factor CSV has duplicate months")
    return table


def _stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


@dataclass
class AlphaReport:
    models: dict     # name -> {"alpha_pct", "t_stat", "p_value", "stars", "n_obs"}

    def to_dict(self) -> dict:
        return self.models


def alpha_regressions(strategy_returns, months, factor_table: pd.DataFrame,
                      models=None) -> AlphaReport:
    """Monthly alpha (in percent) of the strategy on each factor model, with
    heteroskedasticity-robust (HC1) t-statistics and 10/5/1 percent stars."""
    r = np.asarray(strategy_returns, dtype=float)
    if len(months) != r.size:
        raise ValueError("months and returns must align")
    table = factor_table.set_index("month")
    missing_months = [m for m in months if m not in table.index]
    if missing_months:
        raise DataError(f"factor table is missing months, e.g. {missing_months[0]}")
    rows = table.loc[list(months)]
    results = {}
    for name in (models or FACTOR_MODELS):
        cols = FACTOR_MODELS[name]
        absent = [c for c in cols if c not in rows.columns]
        if absent:
            raise DataError(f"factor table lacks columns {absent} for model {name}")
        F = rows[list(cols)].to_numpy(dtype=float)
        X = np.column_stack([np.ones(r.size), F])
        n, k = X.shape
        if n <= k:
            raise ValueError(f"not enough observations for model {name}")
        xtx_inv = np.linalg.inv(X.T @ X)
        beta = xtx_inv @ (X.T @ r)
        resid = r - X @ beta
        meat = X.T @ (X * (resid ** 2)[:, None])
        cov = xtx_inv @ meat @ xtx_inv * (n / (n - k))
        t_stat = float(beta[0] / math.sqrt(cov[0, 0]))
        p = float(2.0 * norm.sf(abs(t_stat)))
        results[name] = {
            "alpha_pct": float(100.0 * beta[0]),
            "t_stat": t_stat,
            "p_value": p,
            "stars": _stars(p),
            "n_obs": int(n),
        }
    return AlphaReport(models=results)
