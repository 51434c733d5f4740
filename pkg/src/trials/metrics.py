"""Backtest performance measures: Sharpe ratio, annualized return, maximum
drawdown, annualized volatility, and the average Euclidean pair distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRADING_DAYS_PER_YEAR = 252
DEFAULT_RISK_FREE_DAILY = 0.000085


class MetricError(ValueError):
    """Metric undefined for the given return series."""


@dataclass(frozen=True)
class MetricsReport:
    sr: float
    ar: float
    mdd: float
    av: float
    ed: float
    n_days: int
    r_f: float = DEFAULT_RISK_FREE_DAILY

    def as_dict(self) -> dict:
        return {"sr": self.sr, "ar": self.ar, "mdd": self.mdd, "av": self.av,
                "ed": self.ed, "n_days": self.n_days, "r_f": self.r_f}


def sharpe(daily_returns, r_f: float = DEFAULT_RISK_FREE_DAILY,
           annualize: bool = True) -> float:
    """(mean - r_f) / std, sample std (ddof=1), annualized by sqrt(252)."""
    r = np.asarray(daily_returns, dtype=float)
    if r.size < 2:
        raise MetricError("need at least 2 returns")
    s = r.std(ddof=1)
    if s == 0.0:
        raise MetricError("zero dispersion")
    sr = (r.mean() - r_f) / s
    return sr * np.sqrt(TRADING_DAYS_PER_YEAR) if annualize else sr


def annualized_return(daily_returns) -> float:
    """Geometric annualization: (prod(1+r))**(252/n) - 1."""
    r = np.asarray(daily_returns, dtype=float)
    if r.size == 0:
        raise MetricError("empty return series")
    if np.any(r <= -1.0):
        raise MetricError("return <= -1 (bankruptcy)")
    growth = np.prod(1.0 + r)
    return growth ** (TRADING_DAYS_PER_YEAR / r.size) - 1.0


def max_drawdown(daily_returns) -> float:
    """Worst peak-to-trough wealth loss; reported as a number <= 0."""
    r = np.asarray(daily_returns, dtype=float)
    if r.size == 0:
        raise MetricError("empty return series")
    wealth = np.cumprod(1.0 + r)
    peak = np.maximum.accumulate(wealth)
    return float(np.min(wealth / peak - 1.0))


def annualized_vol(daily_returns) -> float:
    r = np.asarray(daily_returns, dtype=float)
    if r.size < 2:
        raise MetricError("need at least 2 returns")
    return float(r.std(ddof=1) * np.sqrt(TRADING_DAYS_PER_YEAR))


def euclid_distance(table, pair, window: range) -> float:
    """Mean squared gap between unit-start-normalized close paths.

    Shares its definition with the distance-based pair selector.
    """
    from .baselines import pair_distance
    return pair_distance(table, pair.i, pair.j, window)


def compute_report(daily_returns, table=None, pair=None, window: range | None = None,
                   r_f: float = DEFAULT_RISK_FREE_DAILY) -> MetricsReport:
    """All five measures for one trajectory; degenerate SR maps to 0 for a
    perfectly flat series (no trades) rather than raising."""
    r = np.asarray(daily_returns, dtype=float)
    try:
        sr = sharpe(r, r_f=r_f)
    except MetricError:
        sr = 0.0
    try:
        av = annualized_vol(r)
    except MetricError:
        av = 0.0
    ar = annualized_return(r) if np.all(r > -1.0) and r.size else (0.0 if not r.size else -1.0)
    mdd = max_drawdown(r) if r.size else 0.0
    ed = euclid_distance(table, pair, window) if table is not None else float("nan")
    return MetricsReport(sr=sr, ar=ar, mdd=mdd, av=av, ed=ed, n_days=int(r.size), r_f=r_f)
