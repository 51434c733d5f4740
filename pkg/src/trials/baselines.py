"""Classical pair selection (distance, correlation, Engle-Granger
cointegration) and the fixed-threshold trading rule.

The ADF regression is Δs_t = δ + ρ s_{t-1} + Σ φ_k Δs_{t-k} + ε with the lag
order chosen by AIC on a common sample, mirroring the standard two-step
Engle-Granger procedure.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .market_data import PriceTable
from .trading_env import (EnvConfig, PairOption, PairTradingEnv, TradeAction,
                          pair_to_flat)

# MacKinnon asymptotic critical values, constant-only regression (no trend),
# at the 1% / 5% / 10% levels.
ADF_CRITICAL = {0.01: -3.43, 0.05: -2.86, 0.10: -2.57}


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class SpreadModel:
    """Spread definition plus its formation-period mean and deviation."""
    kind: str                  # "normalized-diff" | "ols-residual"
    beta: float
    alpha: float
    mu: float
    sigma: float
    base_i: float = 1.0        # formation-start prices (normalized-diff)
    base_j: float = 1.0

    def spread_series(self, table: PriceTable, pair: PairOption,
                      period: range) -> np.ndarray:
        sl = slice(period.start, period.stop)
        ci = table.close[pair.i, sl]
        cj = table.close[pair.j, sl]
        if self.kind == "normalized-diff":
            return ci / self.base_i - cj / self.base_j
        if self.kind == "ols-residual":
            return np.log(cj) - self.alpha - self.beta * np.log(ci)
        raise BaselineError(f"unknown spread kind {self.kind!r}")

    def zscore(self, table: PriceTable, pair: PairOption, period: range) -> np.ndarray:
        if self.sigma <= 0:
            raise BaselineError("degenerate spread (sigma = 0)")
        return (self.spread_series(table, pair, period) - self.mu) / self.sigma


@dataclass(frozen=True)
class CointResult:
    adf_statistic: float
    lags: int
    beta: float
    alpha: float
    reject: bool
    degenerate: bool = False


def normalize_to_unit_start(prices) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    if p.size == 0:
        raise BaselineError("empty price series")
    if p[0] <= 0:
        raise BaselineError("first price must be positive")
    return p / p[0]


def pair_distance(table: PriceTable, i: int, j: int, window: range,
                  agg: str = "mean") -> float:
    """Squared gap between unit-start-normalized close paths, averaged
    (or summed, agg='sum') over the window."""
    sl = slice(window.start, window.stop)
    pi = normalize_to_unit_start(table.close[i, sl])
    pj = normalize_to_unit_start(table.close[j, sl])
    gaps = (pi - pj) ** 2
    return float(gaps.mean() if agg == "mean" else gaps.sum())


def ssd_select(table: PriceTable, formation: range,
               agg: str = "mean") -> list[tuple[PairOption, float]]:
    """All pairs scored by normalized-price distance, ascending (rank 1 first)."""
    n = table.n_assets
    if n < 2:
        raise BaselineError("need at least 2 assets")
    scored = []
    for i in range(n):
        for j in range(i + 1, n):
            scored.append((PairOption.from_pair(i, j, n),
                           pair_distance(table, i, j, formation, agg=agg)))
    scored.sort(key=lambda t: (t[1], t[0].flat_index))
    return scored


def corr_select(table: PriceTable, formation: range) -> list[tuple[PairOption, float]]:
    """Pairs ranked by Pearson correlation of daily close returns, descending.
    Zero-variance assets are excluded with a warning."""
    n = table.n_assets
    sl = slice(formation.start, formation.stop)
    close = table.close[:, sl]
    rets = close[:, 1:] / close[:, :-1] - 1.0
    ok = rets.std(axis=1) > 0
    for a in np.flatnonzero(~ok):
        warnings.warn(f"asset {table.assets[a]} has zero return variance; excluded")
    scored = []
    for i in range(n):
        for j in range(i + 1, n):
            if not (ok[i] and ok[j]):
                continue
            r = float(np.corrcoef(rets[i], rets[j])[0, 1])
            scored.append((PairOption.from_pair(i, j, n), r))
    scored.sort(key=lambda t: (-t[1], t[0].flat_index))
    return scored


# -- augmented Dickey-Fuller ---------------------------------------------

def _ols(y: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Least squares fit; returns (coefs, ssr, se)."""
    coefs, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < x.shape[1]:
        raise BaselineError("singular design matrix")
    resid = y - x @ coefs
    ssr = float(resid @ resid)
    n, k = x.shape
    sigma2 = ssr / (n - k)
    xtx_inv = np.linalg.inv(x.T @ x)
    se = np.sqrt(sigma2 * np.diag(xtx_inv))
    return coefs, ssr, se


def default_max_lag(n: int) -> int:
    """Schwert's rule of thumb: ceil(12 (n/100)^(1/4)), capped by sample size."""
    nobs = n - 1
    ml = int(np.ceil(12.0 * (nobs / 100.0) ** 0.25))
    return max(0, min(ml, nobs // 2 - 2))


def adf_statistic(series, max_lag: int | None = None) -> tuple[float, int]:
    """ADF t-statistic (constant-only regression), lag picked by AIC over
    0..max_lag on a common sample, then refit on the full available sample."""
    s = np.asarray(series, dtype=float)
    if max_lag is None:
        max_lag = default_max_lag(s.size)
    if s.size <= max_lag + 2:
        raise BaselineError("series too short for max_lag")
    ds = np.diff(s)

    # lag selection on the sample trimmed for the largest candidate
    n_sel = ds.size - max_lag
    y_sel = ds[max_lag:]
    level_sel = s[max_lag:-1]
    best_lag, best_aic = 0, np.inf
    for lag in range(max_lag + 1):
        cols = [level_sel] + [ds[max_lag - k:max_lag - k + n_sel] for k in range(1, lag + 1)]
        x = np.column_stack(cols + [np.ones(n_sel)])
        _, ssr, _ = _ols(y_sel, x)
        k_params = x.shape[1]
        aic = n_sel * np.log(ssr / n_sel) + 2 * k_params
        if aic < best_aic:
            best_aic, best_lag = aic, lag

    # final fit with the chosen lag on the maximal sample
    lag = best_lag
    n_fit = ds.size - lag
    y = ds[lag:]
    level = s[lag:-1]
    cols = [level] + [ds[lag - k:lag - k + n_fit] for k in range(1, lag + 1)]
    x = np.column_stack(cols + [np.ones(n_fit)])
    coefs, _, se = _ols(y, x)
    return float(coefs[0] / se[0]), lag


def engle_granger(x: np.ndarray, y: np.ndarray,
                  max_lag: int | None = None,
                  significance: float = 0.05) -> CointResult:
    """Two-step test: OLS of y on x (with constant), then ADF on the residuals."""
    design = np.column_stack([x, np.ones(x.size)])
    coefs, _, _ = _ols(y, design)
    beta, alpha = float(coefs[0]), float(coefs[1])
    resid = y - design @ coefs
    if resid.std() < 1e-12:
        return CointResult(adf_statistic=float("nan"), lags=0, beta=beta, alpha=alpha,
                           reject=False, degenerate=True)
    stat, lags = adf_statistic(resid, max_lag=max_lag)
    crit = ADF_CRITICAL[significance]
    return CointResult(adf_statistic=stat, lags=lags, beta=beta, alpha=alpha,
                       reject=stat < crit)


def coint_select(table: PriceTable, formation: range, significance: float = 0.05,
                 max_lag: int | None = None) -> list[tuple[PairOption, CointResult]]:
    """All pairs tested on log close prices over the formation window, ranked
    most-negative statistic first; degenerate pairs sort last."""
    n = table.n_assets
    if n < 2:
        raise BaselineError("need at least 2 assets")
    sl = slice(formation.start, formation.stop)
    logc = np.log(table.close[:, sl])
    scored = []
    for i in range(n):
        for j in range(i + 1, n):
            res = engle_granger(logc[i], logc[j], max_lag=max_lag,
                                significance=significance)
            scored.append((PairOption.from_pair(i, j, n), res))
    scored.sort(key=lambda t: (np.inf if t[1].degenerate else t[1].adf_statistic,
                               t[0].flat_index))
    if not any(r.reject for _, r in scored):
        warnings.warn("no pair rejects the unit root; returning best statistic anyway")
    return scored


def fit_spread_model(table: PriceTable, pair: PairOption, formation: range,
                     kind: str = "normalized-diff") -> SpreadModel:
    sl = slice(formation.start, formation.stop)
    ci = table.close[pair.i, sl]
    cj = table.close[pair.j, sl]
    if kind == "normalized-diff":
        model = SpreadModel(kind=kind, beta=1.0, alpha=0.0, mu=0.0, sigma=1.0,
                            base_i=float(ci[0]), base_j=float(cj[0]))
    elif kind == "ols-residual":
        res = engle_granger(np.log(ci), np.log(cj))
        model = SpreadModel(kind=kind, beta=res.beta, alpha=res.alpha, mu=0.0, sigma=1.0)
    else:
        raise BaselineError(f"unknown spread kind {kind!r}")
    spread = model.spread_series(table, pair, formation)
    sigma = float(spread.std(ddof=1))
    return SpreadModel(kind=model.kind, beta=model.beta, alpha=model.alpha,
                       mu=float(spread.mean()), sigma=sigma,
                       base_i=model.base_i, base_j=model.base_j)


def threshold_actions(z: np.ndarray, k_open: float = 2.0,
                      k_close: float = 0.0) -> list[TradeAction]:
    """Open short (long) spread when z breaches +(-)k_open; close when z
    reverts through the +/-k_close band; otherwise hold."""
    actions = [TradeAction.C]
    pos = TradeAction.C
    for t in range(1, z.size):
        if pos == TradeAction.C:
            if z[t] > k_open:
                pos = TradeAction.S
            elif z[t] < -k_open:
                pos = TradeAction.L
        elif pos == TradeAction.S and z[t] <= k_close:
            pos = TradeAction.C
        elif pos == TradeAction.L and z[t] >= -k_close:
            pos = TradeAction.C
        actions.append(pos)
    return actions


def threshold_trade(pair: PairOption, spread_model: SpreadModel, table: PriceTable,
                    period: range, k_open: float = 2.0, k_close: float = 0.0,
                    cost: float = 0.001) -> tuple[list[TradeAction], list[float]]:
    """Fixed-threshold z-score strategy; rewards come from the trading
    environment (single accounting code path)."""
    z = spread_model.zscore(table, pair, period)
    actions = threshold_actions(z, k_open=k_open, k_close=k_close)
    env = PairTradingEnv(pair, table, period, EnvConfig(cost=cost))
    rewards = env.replay(actions[1:])
    return env.actions, rewards


def export_pair_ranking(path, rankings: dict[str, list]) -> None:
    """pair_ranking.csv: columns i,j,method,score,reject."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "method", "score", "reject"])
        for method, ranked in rankings.items():
            for pair, score in ranked:
                if isinstance(score, CointResult):
                    w.writerow([pair.i, pair.j, method, repr(score.adf_statistic),
                                int(score.reject)])
                else:
                    w.writerow([pair.i, pair.j, method, repr(float(score)), ""])
