"""FDR-controlled long-only asset selection.

Assets are screened by one-sided tests of H0: expected excess return = 0
against a positive alternative, with the Benjamini-Hochberg step-up rule
controlling the false discovery rate. Three portfolio rules are provided:
selection by ML forecast t-statistics (FCI-FDR), a plain top-K by predicted
return (Highest-K), and a benchmark that tests realized average returns
instead of forecasts (Naive-FDR). Chosen assets are equally weighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


@dataclass(frozen=True)
class TestPanel:
    """Per-asset one-sided test statistics (positive alternative)."""

    asset_ids: tuple
    t_stats: np.ndarray
    p_values: np.ndarray
    side: str = "one_sided_positive"


@dataclass
class SelectionResult:
    asset_ids: tuple
    rejected: np.ndarray            # bool per asset
    cutoff: float                   # BH p-value cutoff, 0.0 if nothing rejected
    k_bh: int                       # number of BH rejections
    chosen: tuple                   # asset ids in the portfolio, by descending z_hat
    weights: np.ndarray             # per asset, equal weight on chosen, else 0
    t_stats: np.ndarray = None
    p_values: np.ndarray = None

    @property
    def empty(self) -> bool:
        return len(self.chosen) == 0

    def to_rows(self):
        """Rows (asset_id, t, p, rejected, chosen, weight) for CSV export."""
        chosen_set = set(self.chosen)
        rows = []
        for i, aid in enumerate(self.asset_ids):
            t = float("nan") if self.t_stats is None else float(self.t_stats[i])
            p = float("nan") if self.p_values is None else float(self.p_values[i])
            rows.append((aid, t, p, bool(self.rejected[i]), aid in chosen_set,
                         float(self.weights[i])))
        return rows


def _default_ids(n):
    return tuple(range(n))


def one_sided_p_values(t_stats: np.ndarray) -> np.ndarray:
    """p_i = 1 - Phi(t_i) for the positive one-sided alternative."""
    return norm.sf(np.asarray(t_stats, dtype=float))


def bh_select(p_values: np.ndarray, alpha: float, asset_ids=None) -> SelectionResult:
    """Benjamini-Hochberg step-up rule at level alpha.

    K = max{i : p_(i) <= alpha * i / R}; every p-value <= p_(K) is rejected,
    so tied p-values share a fate. Returns cutoff 0 and no rejections when
    the set is empty.
    """
    p = np.asarray(p_values, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    R = p.size
    ids = _default_ids(R) if asset_ids is None else tuple(asset_ids)
    order = np.sort(p)
    thresholds = alpha * np.arange(1, R + 1) / R
    passing = np.flatnonzero(order <= thresholds)
    if passing.size == 0:
        rejected = np.zeros(R, dtype=bool)
        cutoff = 0.0
    else:
        cutoff = float(order[passing[-1]])
        rejected = p <= cutoff
    return SelectionResult(
        asset_ids=ids,
        rejected=rejected,
        cutoff=cutoff,
        k_bh=int(rejected.sum()),
        chosen=(),
        weights=np.zeros(R),
        p_values=p,
    )


def _pick_top(z_hat, candidate_mask, k_portfolio):
    """Indices of the top-k candidates by z_hat, ties broken by asset index."""
    idx = np.flatnonzero(candidate_mask)
    if idx.size == 0:
        return idx
    order = idx[np.argsort(-z_hat[idx], kind="stable")]
    return order[:k_portfolio]


def _equal_weight_result(base: SelectionResult, z_hat, t, p, k_portfolio) -> SelectionResult:
    top = _pick_top(np.asarray(z_hat, dtype=float), base.rejected, k_portfolio)
    weights = np.zeros(len(base.asset_ids))
    if top.size:
        weights[top] = 1.0 / top.size
    return SelectionResult(
        asset_ids=base.asset_ids,
        rejected=base.rejected,
        cutoff=base.cutoff,
        k_bh=base.k_bh,
        chosen=tuple(base.asset_ids[i] for i in top),
        weights=weights,
        t_stats=None if t is None else np.asarray(t, dtype=float),
        p_values=None if p is None else np.asarray(p, dtype=float),
    )


def strategy_fci_fdr(z_hat, se, alpha: float, k_portfolio: int,
                     asset_ids=None) -> SelectionResult:
    """Long the k assets with the highest predicted returns among those whose
    forecast is significantly positive after BH-FDR adjustment.

    An empty selection (nothing significant) is a valid outcome: all weights
    zero, to be interpreted as holding the risk-free asset.
    """
    z = np.asarray(z_hat, dtype=float)
    s = np.asarray(se, dtype=float)
    if np.any(s <= 0):
        raise ValueError("standard errors must be strictly positive")
    if k_portfolio < 1:
        raise ValueError("k_portfolio must be >= 1")
    t = z / s
    p = one_sided_p_values(t)
    base = bh_select(p, alpha, asset_ids=asset_ids)
    return _equal_weight_result(base, z, t, p, k_portfolio)


def strategy_highest_k(z_hat, k_portfolio: int, asset_ids=None) -> SelectionResult:
    """Long the k assets with the highest predicted returns, no testing."""
    z = np.asarray(z_hat, dtype=float)
    if k_portfolio < 1:
        raise ValueError("k_portfolio must be >= 1")
    ids = _default_ids(z.size) if asset_ids is None else tuple(asset_ids)
    base = SelectionResult(
        asset_ids=ids,
        rejected=np.ones(z.size, dtype=bool),
        cutoff=1.0,
        k_bh=z.size,
        chosen=(),
        weights=np.zeros(z.size),
    )
    return _equal_weight_result(base, z, None, None, k_portfolio)


def strategy_naive_fdr(history: np.ndarray, alpha: float, k_portfolio: int,
                       z_hat, asset_ids=None) -> SelectionResult:
    """BH selection on t-statistics of realized average returns
    (mean / (sd / sqrt(T))), then top-k by predicted return among the
    rejected assets.

    A zero-variance history column gets t = +inf when its mean is positive,
    t = -inf when negative, and is excluded (p = 1) when the mean is zero.
    """
    H = np.asarray(history, dtype=float)
    if H.ndim != 2 or H.shape[0] < 2:
        raise ValueError("history must be a (T, R) matrix with T >= 2")
    z = np.asarray(z_hat, dtype=float)
    if z.size != H.shape[1]:
        raise ValueError("z_hat length must match history columns")
    T = H.shape[0]
    mean = H.mean(axis=0)
    sd = H.std(axis=0, ddof=1)
    degenerate = np.ptp(H, axis=0) == 0          # exactly constant columns
    t = np.empty_like(mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        np.divide(mean, sd / np.sqrt(T), out=t)
    t[degenerate & (mean > 0)] = np.inf
    t[degenerate & (mean < 0)] = -np.inf
    p = one_sided_p_values(t)
    p[degenerate & (mean == 0)] = 1.0
    base = bh_select(p, alpha, asset_ids=asset_ids)
    return _equal_weight_result(base, z, t, p, k_portfolio)
