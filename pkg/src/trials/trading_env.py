"""Deterministic pair-trading environment.

One unit of exposure: long the spread (L, +1) means long leg X and short
leg Y; S (-1) is the reverse; C (0) is flat.  The per-step return is
    R_t = a_{t-1} (r_X,t - r_Y,t) - c |a_t - a_{t-1}|
with r the simple close-to-close return of each raw price series, and the
account compounds N_t = N_{t-1} (1 + R_t).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .market_data import PriceTable


class EnvError(RuntimeError):
    pass


def n_pairs(n_assets: int) -> int:
    return n_assets * (n_assets - 1) // 2


def pair_to_flat(i: int, j: int, n_assets: int) -> int:
    """Row-major position of (i, j), i<j, in the flattened strict upper triangle."""
    if not 0 <= i < j < n_assets:
        raise ValueError(f"invalid pair ({i}, {j}) for N={n_assets}")
    return i * n_assets - i * (i + 1) // 2 + (j - i - 1)


def flat_to_pair(k: int, n_assets: int) -> tuple[int, int]:
    if not 0 <= k < n_pairs(n_assets):
        raise ValueError(f"flat index {k} out of range for N={n_assets}")
    i = 0
    row = n_assets - 1
    while k >= row:
        k -= row
        i += 1
        row -= 1
    return i, i + 1 + k


@dataclass(frozen=True)
class PairOption:
    """The manager's action: an unordered asset pair plus its triu index."""
    i: int
    j: int
    flat_index: int

    @classmethod
    def from_pair(cls, i: int, j: int, n_assets: int) -> "PairOption":
        return cls(i=i, j=j, flat_index=pair_to_flat(i, j, n_assets))

    @classmethod
    def from_flat(cls, k: int, n_assets: int) -> "PairOption":
        i, j = flat_to_pair(k, n_assets)
        return cls(i=i, j=j, flat_index=k)


class TradeAction(IntEnum):
    L = 1
    C = 0
    S = -1


# index order used by policy heads and embeddings
ACTION_ORDER = (TradeAction.L, TradeAction.C, TradeAction.S)
ACTION_INDEX = {a: k for k, a in enumerate(ACTION_ORDER)}


@dataclass
class AccountState:
    """Worker-side bookkeeping; invariant N = C + V, V = 0 while flat."""
    prev_action: TradeAction = TradeAction.C
    cash: float = 1.0
    position_value: float = 0.0
    net_value: float = 1.0


@dataclass(frozen=True)
class TradeObservation:
    """Account features plus both legs' normalized price features at one step."""
    account: AccountState
    prices: np.ndarray  # [open_x, close_x, vol_x, open_y, close_y, vol_y], normalized

    def feature_key(self) -> tuple:
        a = self.account
        return (int(a.prev_action), a.cash, a.position_value, a.net_value,
                tuple(self.prices))


@dataclass(frozen=True)
class EnvConfig:
    cost: float = 0.001
    price_field: str = "close"

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("cost must be >= 0")
        if self.price_field not in ("close", "open"):
            raise ValueError("price_field must be close or open")


@dataclass(frozen=True)
class EpisodeOutcome:
    profit: float
    gross: float
    bankrupt: bool


def episode_return(rewards) -> EpisodeOutcome:
    """prod(1 + R_t) in profit form, saturating at -1 on bankruptcy."""
    gross = 1.0
    for r in rewards:
        if r <= -1.0:
            return EpisodeOutcome(profit=-1.0, gross=0.0, bankrupt=True)
        gross *= 1.0 + r
    return EpisodeOutcome(profit=gross - 1.0, gross=gross, bankrupt=False)


class PairTradingEnv:
    """Steps through one trading period for one pair.

    Steps are transitions between consecutive days of the period; the episode
    has len(period) - 1 steps and the final step forces a clear (the submitted
    action is replaced by C, cost charged) so reported profit closes the book.
    """

    def __init__(self, pair: PairOption, table: PriceTable, period: range,
                 config: EnvConfig = EnvConfig()):
        if table.normalized:
            raise EnvError("env needs the raw price table (returns use raw prices)")
        if len(period) < 2:
            raise EnvError("period too short: need at least one transition")
        self.pair = pair
        self.period = period
        self.config = config
        px = getattr(table, config.price_field)
        self._px_x = px[pair.i, period.start:period.stop].astype(float)
        self._px_y = px[pair.j, period.start:period.stop].astype(float)
        # log-normalized observation features for both legs, centered at the
        # panel's first day so magnitudes stay in the GRU's linear range and
        # the pair's log-price spread is observable up to its day-0 value
        feats = np.empty((len(period), 6))
        sl = slice(period.start, period.stop)
        for col, (asset, m) in enumerate(
                [(pair.i, table.open), (pair.i, table.close), (pair.i, table.volume),
                 (pair.j, table.open), (pair.j, table.close), (pair.j, table.volume)]):
            vals = m[asset, sl].astype(float)
            base = float(m[asset, 0])
            if col in (2, 5):
                feats[:, col] = np.log1p(vals) - np.log1p(base)
            else:
                feats[:, col] = np.log(vals) - np.log(base)
        self._features = feats
        self.account = AccountState()
        self._t = 0
        self._done = False
        self.rewards: list[float] = []
        self.actions: list[TradeAction] = [TradeAction.C]
        self.trajectory: list[tuple] = []

    @property
    def n_steps(self) -> int:
        return len(self.period) - 1

    def leg_returns(self, t: int) -> tuple[float, float]:
        """Simple returns of both legs over the transition into step t."""
        rx = self._px_x[t] / self._px_x[t - 1] - 1.0
        ry = self._px_y[t] / self._px_y[t - 1] - 1.0
        return rx, ry

    def _observe(self) -> TradeObservation:
        a = self.account
        return TradeObservation(
            account=AccountState(prev_action=a.prev_action, cash=a.cash,
                                 position_value=a.position_value,
                                 net_value=a.net_value),
            prices=self._features[self._t].copy())

    def reset(self) -> TradeObservation:
        self.account = AccountState()
        self._t = 0
        self._done = False
        self.rewards = []
        self.actions = [TradeAction.C]
        self.trajectory = []
        return self._observe()

    def step(self, action: TradeAction) -> tuple[TradeObservation, float, bool]:
        if self._done:
            raise EnvError("step after episode end")
        t = self._t + 1
        terminal = t == len(self.period) - 1
        if terminal:
            action = TradeAction.C  # forced clear
        prev = self.account.prev_action
        rx, ry = self.leg_returns(t)
        reward = int(prev) * (rx - ry) - self.config.cost * abs(int(action) - int(prev))
        net = self.account.net_value * (1.0 + reward)
        if action != prev or action == TradeAction.C:
            cash, pos = net, 0.0
        else:
            cash, pos = self.account.cash, net - self.account.cash
        self.account = AccountState(prev_action=action, cash=cash,
                                    position_value=pos, net_value=net)
        self._t = t
        self._done = terminal
        self.rewards.append(reward)
        self.actions.append(action)
        self.trajectory.append((t, action, rx, ry, reward, net, cash, pos))
        return self._observe(), reward, terminal

    def replay(self, actions) -> list[float]:
        """Run a fixed action sequence (one action per transition) from reset."""
        self.reset()
        rewards = []
        for a in actions:
            _, r, done = self.step(a)
            rewards.append(r)
            if done:
                break
        return rewards

    def export_trajectory(self, path) -> None:
        """CSV: step,action,r_x,r_y,reward,net_value,cash,position_value."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "action", "r_x", "r_y", "reward", "net_value",
                        "cash", "position_value"])
            for t, act, rx, ry, rew, net, cash, pos in self.trajectory:
                w.writerow([t, act.name, repr(rx), repr(ry), repr(rew),
                            repr(net), repr(cash), repr(pos)])
