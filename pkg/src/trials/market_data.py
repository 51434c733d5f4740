"""Daily price panels: CSV ingestion, log normalization, period splits,
and a seeded synthetic universe with one planted mean-reverting pair."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np


class DataError(ValueError):
    """Malformed or unusable market data."""


@dataclass(frozen=True)
class PriceTable:
    """Per-asset, per-day open/close/volume panel.

    All three matrices are [assets x days].  Raw tables require strictly
    positive prices; ``normalized`` tables (after log transform) do not.
    """
    assets: tuple[str, ...]
    dates: tuple[str, ...]
    open: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        shape = (len(self.assets), len(self.dates))
        for name in ("open", "close", "volume"):
            m = getattr(self, name)
            if m.shape != shape:
                raise DataError(f"{name} matrix shape {m.shape} != {shape}")
            if not np.all(np.isfinite(m)):
                raise DataError(f"non-finite value in {name}")
        if list(self.dates) != sorted(set(self.dates)):
            raise DataError("dates must be strictly increasing")
        if not self.normalized:
            if np.any(self.open <= 0) or np.any(self.close <= 0):
                raise DataError("non-positive price")
            if np.any(self.volume < 0):
                raise DataError("negative volume")

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def select_assets(self, names: list[str]) -> "PriceTable":
        idx = [self.assets.index(a) for a in names]
        return replace(self, assets=tuple(names), open=self.open[idx],
                       close=self.close[idx], volume=self.volume[idx])


@dataclass(frozen=True)
class PeriodSplit:
    """Half-open day-index ranges: formation < trading < validation < test."""
    formation: range
    trading: range
    validation: range
    test: range

    def __post_init__(self):
        ranges = [self.formation, self.trading, self.validation, self.test]
        prev_stop = 0
        for r in ranges:
            if len(r) == 0:
                raise DataError("empty range")
            if r.start != prev_stop:
                raise DataError("ranges must tile contiguously")
            prev_stop = r.stop


@dataclass(frozen=True)
class SyntheticSpec:
    """Configuration for the planted-pair synthetic universe."""
    n_assets: int = 6
    n_days: int = 5000
    planted_pair: tuple[int, int] = (0, 1)
    factor_vol: float = 0.01
    idio_vol: float = 0.012
    ou_kappa: float = 0.15
    ou_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        i, j = self.planted_pair
        if self.n_assets < 3:
            raise DataError("n_assets must be >= 3")
        if not (0 <= i < self.n_assets and 0 <= j < self.n_assets and i != j):
            raise DataError("planted_pair indices invalid")
        if min(self.factor_vol, self.idio_vol, self.ou_sigma) < 0 or \
                max(self.factor_vol, self.idio_vol) <= 0:
            raise DataError("volatilities must be positive")
        if not 0.0 < self.ou_kappa < 1.0:
            raise DataError("ou_kappa must be in (0, 1)")


def split_periods(n_days: int, train_frac: float = 0.90, formation_frac: float = 0.85,
                  valid_frac: float = 0.05, test_frac: float = 0.05) -> PeriodSplit:
    """Carve [0, n_days) into formation/trading/validation/test by flooring
    cumulative fractions left to right."""
    fracs = (formation_frac, train_frac - formation_frac, valid_frac, test_frac)
    if any(f <= 0 or f >= 1 for f in (train_frac, formation_frac, valid_frac, test_frac)):
        raise DataError("fractions must be in (0, 1)")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise DataError("fractions must sum to 1")
    b1 = int(np.floor(n_days * formation_frac))
    b2 = int(np.floor(n_days * train_frac))
    b3 = int(np.floor(n_days * (train_frac + valid_frac)))
    return PeriodSplit(formation=range(0, b1), trading=range(b1, b2),
                       validation=range(b2, b3), test=range(b3, n_days))


def log_normalize(table: PriceTable, normalize_volume: bool = True) -> PriceTable:
    """Replace prices by ln(price); volume by log1p(volume) unless disabled."""
    vol = np.log1p(table.volume) if normalize_volume else table.volume.copy()
    return replace(table, open=np.log(table.open), close=np.log(table.close),
                   volume=vol, normalized=True)


def gen_synthetic_universe(spec: SyntheticSpec) -> PriceTable:
    """Deterministic synthetic panel.

    The planted pair shares a common Gaussian-random-walk factor and its
    log-price difference follows the discrete OU recursion
    s[t+1] = (1 - kappa) s[t] + sigma eps; every other asset is an
    independent Gaussian random walk.  Volumes are log-normal.
    """
    rng = np.random.default_rng(spec.seed)
    n, t = spec.n_assets, spec.n_days
    pi, pj = spec.planted_pair

    log_close = np.empty((n, t))
    base = np.log(100.0)
    for a in range(n):
        if a in (pi, pj):
            continue
        steps = rng.normal(0.0, spec.idio_vol, size=t)
        steps[0] = 0.0
        log_close[a] = base + np.cumsum(steps)

    factor_steps = rng.normal(0.0, spec.factor_vol, size=t)
    factor_steps[0] = 0.0
    factor = base + np.cumsum(factor_steps)
    spread = np.empty(t)
    spread[0] = 0.0
    eps = rng.normal(0.0, 1.0, size=t)
    for k in range(1, t):
        spread[k] = (1.0 - spec.ou_kappa) * spread[k - 1] + spec.ou_sigma * eps[k]
    log_close[pi] = factor + 0.5 * spread
    log_close[pj] = factor - 0.5 * spread

    # open = previous close plus a small overnight perturbation
    overnight = rng.normal(0.0, 0.2 * spec.idio_vol, size=(n, t))
    log_open = np.empty_like(log_close)
    log_open[:, 0] = log_close[:, 0] + overnight[:, 0]
    log_open[:, 1:] = log_close[:, :-1] + overnight[:, 1:]

    # volumes are log-normal around 1e6 shares; most of the daily variation
    # is a market-wide activity level shared by every asset
    activity = rng.normal(0.0, 0.45, size=t)
    volume = np.exp(np.log(1e6) + activity[None, :]
                    + rng.normal(0.0, 0.2, size=(n, t)))
    dates = tuple(_day_stamp(k) for k in range(t))
    assets = tuple(f"SYN{a:02d}" for a in range(n))
    return PriceTable(assets=assets, dates=dates, open=np.exp(log_open),
                      close=np.exp(log_close), volume=volume)


def _day_stamp(k: int) -> str:
    import datetime
    return (datetime.date(2000, 1, 3) + datetime.timedelta(days=k)).isoformat()


# -- CSV interfaces -------------------------------------------------------

def load_price_table(path: str, schema: str = "long",
                     drop_report: str | None = None) -> tuple[PriceTable, list[str]]:
    """Load a panel from CSV.

    ``long``: one file with header date,asset,open,close,volume.
    ``wide``: a directory holding open.csv/close.csv/volume.csv, each with
    header date,<asset>,...

    Assets missing any day are dropped and returned (and written to
    ``drop_report`` when given, one identifier per line).
    """
    if schema == "long":
        table, dropped = _load_long(path)
    elif schema == "wide":
        table, dropped = _load_wide(path)
    else:
        raise DataError(f"unknown schema {schema!r}")
    if drop_report is not None:
        with open(drop_report, "w", encoding="utf-8") as f:
            for a in dropped:
                f.write(a + "\n")
    return table, dropped


def _load_long(path: str) -> tuple[PriceTable, list[str]]:
    cells: dict[str, dict[str, tuple[float, float, float]]] = {}
    date_order: list[str] = []
    seen_dates: set[str] = set()
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"unreadable file {path}: {exc}") from exc
    with f:
        reader = csv.DictReader(f)
        required = {"date", "asset", "open", "close", "volume"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: expected header {sorted(required)}")
        for row in reader:
            date, asset = row["date"], row["asset"]
            if date not in seen_dates:
                seen_dates.add(date)
                date_order.append(date)
            cells.setdefault(asset, {})[date] = (
                float(row["open"]), float(row["close"]), float(row["volume"]))
    if date_order != sorted(date_order):
        raise DataError("non-monotone dates")
    return _assemble(cells, date_order)


def _load_wide(path: str) -> tuple[PriceTable, list[str]]:
    fields = {}
    for name in ("open", "close", "volume"):
        fname = os.path.join(path, f"{name}.csv")
        try:
            f = open(fname, newline="", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"unreadable file {fname}: {exc}") from exc
        with f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[0] != "date":
                raise DataError(f"{fname}: first header column must be 'date'")
            assets = header[1:]
            rows = {}
            for row in reader:
                rows[row[0]] = [float(v) if v != "" else np.nan for v in row[1:]]
            fields[name] = (assets, rows)
    assets = fields["close"][0]
    dates = sorted(fields["close"][1])
    for name in ("open", "close", "volume"):
        if fields[name][0] != assets or sorted(fields[name][1]) != dates:
            raise DataError("wide schema files disagree on assets or dates")
        if list(fields[name][1]) != sorted(fields[name][1]):
            raise DataError("non-monotone dates")
    cells: dict[str, dict[str, tuple[float, float, float]]] = {a: {} for a in assets}
    for d in dates:
        for k, a in enumerate(assets):
            o = fields["open"][1][d][k]
            c = fields["close"][1][d][k]
            v = fields["volume"][1][d][k]
            if not (np.isnan(o) or np.isnan(c) or np.isnan(v)):
                cells[a][d] = (o, c, v)
    return _assemble(cells, dates)


def _assemble(cells: dict, dates: list[str]) -> tuple[PriceTable, list[str]]:
    keep, dropped = [], []
    for asset in sorted(cells):
        if set(cells[asset]) == set(dates):
            keep.append(asset)
        else:
            dropped.append(asset)
    if not keep:
        raise DataError("zero surviving assets")
    n, t = len(keep), len(dates)
    op, cl, vol = np.empty((n, t)), np.empty((n, t)), np.empty((n, t))
    for i, asset in enumerate(keep):
        for j, d in enumerate(dates):
            op[i, j], cl[i, j], vol[i, j] = cells[asset][d]
    if np.any(op <= 0) or np.any(cl <= 0):
        raise DataError("non-positive price")
    table = PriceTable(assets=tuple(keep), dates=tuple(dates),
                       open=op, close=cl, volume=vol)
    return table, dropped


def save_price_table(table: PriceTable, path: str, schema: str = "long") -> None:
    """Inverse of load_price_table for complete panels (exact round-trip)."""
    if schema == "long":
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["date", "asset", "open", "close", "volume"])
            for j, d in enumerate(table.dates):
                for i, a in enumerate(table.assets):
                    w.writerow([d, a, repr(float(table.open[i, j])),
                                repr(float(table.close[i, j])),
                                repr(float(table.volume[i, j]))])
    elif schema == "wide":
        os.makedirs(path, exist_ok=True)
        for name in ("open", "close", "volume"):
            m = getattr(table, name)
            with open(os.path.join(path, f"{name}.csv"), "w", newline="",
                      encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(["date", *table.assets])
                for j, d in enumerate(table.dates):
                    w.writerow([d, *[repr(float(x)) for x in m[:, j]]])
    else:
        raise DataError(f"unknown schema {schema!r}")
