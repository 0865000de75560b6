"""Rectangular firm-month panel container.

A :class:`Panel` holds excess returns ``y[i, t]`` together with the lagged
characteristics ``x[i, t]`` that predict them: column ``t`` of ``features``
contains the characteristics observed one month before the return in column
``t`` of ``returns``. ``latest_features`` holds the final month's
characteristics, i.e. the regressors for the out-of-sample forecast one step
ahead. Missing observations (unbalanced panels) are encoded as NaN in
``returns``; a cell is usable only if its return and its full feature vector
are finite.

Characteristics are expected to be rank-normalized to (0, 1] per cross
section before a Panel is built (simulation and CSV loading both do this).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Panel:
    returns: np.ndarray                 # (N, T)
    features: np.ndarray                # (N, T, d)
    latest_features: np.ndarray | None = None   # (N, d)
    asset_ids: tuple = None
    months: tuple = None
    feature_names: tuple = None
    _mask: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        returns = np.asarray(self.returns, dtype=float)
        features = np.asarray(self.features, dtype=float)
        if returns.ndim != 2:
            raise DataError(f"returns must be 2-d (assets x periods), got shape {returns.shape}")
        if features.ndim != 3:
            raise DataError(f"features must be 3-d (assets x periods x chars), got shape {features.shape}")
        if features.shape[:2] != returns.shape:
            raise DataError(
                f"features shape {features.shape[:2]} does not match returns shape {returns.shape}"
            )
        latest = self.latest_features
        if latest is not None:
            latest = np.asarray(latest, dtype=float)
            if latest.shape != (returns.shape[0], features.shape[2]):
                raise DataError(
                    f"latest_features shape {latest.shape} does not match "
                    f"(n_assets, n_features)=({returns.shape[0]}, {features.shape[2]})"
                )
        if self.asset_ids is not None and len(self.asset_ids) != returns.shape[0]:
            raise DataError("asset_ids length does not match number of assets")
        if self.months is not None and len(self.months) != returns.shape[1]:
            raise DataError("months length does not match number of periods")
        if self.feature_names is not None and len(self.feature_names) != features.shape[2]:
            raise DataError("feature_names length does not match characteristics")
        mask = np.isfinite(returns) & np.all(np.isfinite(features), axis=2)
        if not mask.any():
            raise DataError("panel has no usable (feature, return) observations")
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "latest_features", latest)
        object.__setattr__(self, "_mask", mask)

    @property
    def n_assets(self) -> int:
        return self.returns.shape[0]

    @property
    def n_periods(self) -> int:
        return self.returns.shape[1]

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    @property
    def mask(self) -> np.ndarray:
        """(N, T) boolean array of usable observations."""
        return self._mask

    @property
    def n_observations(self) -> int:
        return int(self._mask.sum())

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack usable observations time-major: all assets of period 0, then 1, ...

        Returns (X, y) with X of shape (n_obs, d) and y of shape (n_obs,).
        The order is fixed so that downstream consumers (OLS residual
        clustering, mini-batch shuffling) are reproducible.
        """
        cols = self._mask.T                       # (T, N)
        X = self.features.transpose(1, 0, 2)[cols]
        y = self.returns.T[cols]
        return X, y

    def with_returns(self, new_returns: np.ndarray) -> "Panel":
        """Same panel with substituted returns (features shared, not copied)."""
        return replace(self, returns=np.asarray(new_returns, dtype=float))

    def subset_assets(self, idx) -> "Panel":
        ids = tuple(np.asarray(self.asset_ids)[idx]) if self.asset_ids is not None else None
        return Panel(
            returns=self.returns[idx],
            features=self.features[idx],
            latest_features=None if self.latest_features is None else self.latest_features[idx],
            asset_ids=ids,
            months=self.months,
            feature_names=self.feature_names,
        )

    def subset_periods(self, start: int, stop: int, latest_from_next: bool = False) -> "Panel":
        """Periods [start, stop); optionally take latest_features from the
        feature column at `stop` (the next period's regressors)."""
        latest = self.latest_features
        if latest_from_next:
            if stop >= self.n_periods:
                raise DataError("no feature column available after the window")
            latest = self.features[:, stop, :]
        months = None if self.months is None else tuple(self.months[start:stop])
        return Panel(
            returns=self.returns[:, start:stop],
            features=self.features[:, start:stop, :],
            latest_features=latest,
            asset_ids=self.asset_ids,
            months=months,
            feature_names=self.feature_names,
        )
