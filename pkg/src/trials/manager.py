"""High-level contextual bandit over asset pairs.

The option distribution is a softmax over the flattened strict upper triangle
of the Gram matrix of per-asset latent rows (the policy has no weights of its
own beyond the encoder); the critic is a linear head on the mean-pooled rows.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, RMSProp, Tensor
from .encoder import EncoderParams, encode_formation, init_encoder_params
from .market_data import PriceTable
from .trading_env import PairOption, episode_return, flat_to_pair, n_pairs
from .worker import UpdateDiagnostics


@dataclass
class ManagerNet:
    store: ParameterStore
    encoder: EncoderParams
    w_v: Tensor   # (d_h,)
    b_v: Tensor   # scalar

    @classmethod
    def create(cls, d_h: int, rng: np.random.Generator) -> "ManagerNet":
        store = ParameterStore()
        enc = init_encoder_params(store, "manager.enc", 3, d_h, rng)
        w_v = store.create("manager.w_v", ad.init_matrix(rng, 1, d_h)[0])
        b_v = store.create("manager.b_v", np.zeros(()))
        return cls(store=store, encoder=enc, w_v=w_v, b_v=b_v)

    def value(self, state_rows: list[Tensor]) -> Tensor:
        pooled = ad.stack_mean(state_rows)
        return ad.add(ad.dot(self.w_v, pooled), self.b_v)


def pair_logits(state_rows: list[Tensor]) -> Tensor:
    """Strict upper triangle of the Gram matrix, flattened row-major; entry k
    is the dot product of the rows of pair flat_to_pair(k, N)."""
    n = len(state_rows)
    if n < 2:
        raise ad.ShapeError("need at least 2 assets")
    parts = []
    for i in range(n):
        for j in range(i + 1, n):
            parts.append(_vec1(ad.dot(state_rows[i], state_rows[j])))
    return ad.concat(parts)


def _vec1(scalar: Tensor) -> Tensor:
    data = scalar.data.reshape(1)

    def bw(g):
        return (g.reshape(scalar.data.shape),)

    return Tensor(data, _parents=(scalar,), _backward=bw)


def option_distribution(state_rows: list[Tensor]) -> Tensor:
    return ad.softmax(pair_logits(state_rows))


def select_option(logits, mode: str, n_assets: int,
                  rng: np.random.Generator | None = None) -> PairOption:
    """softmax over logits; greedy argmax breaks ties toward the lowest flat
    index (numpy argmax already does)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, float)
    if z.size != n_pairs(n_assets):
        raise ValueError("logit count does not match n_assets")
    if mode == "greedy":
        k = int(np.argmax(z))
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        e = np.exp(z - z.max())
        p = e / e.sum()
        c = np.cumsum(p)
        k = int(np.searchsorted(c, rng.random() * c[-1], side="right").clip(0, z.size - 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return PairOption.from_flat(k, n_assets)


def extrinsic_reward(trading_rewards) -> float:
    """Compounded trading-period profit of the worker's greedy run."""
    return episode_return(trading_rewards).profit


def manager_update(state_rows: list[Tensor], option: PairOption, reward: float,
                   net: ManagerNet, optimizer: RMSProp,
                   bootstrap_value: float | None = None,
                   gamma: float = 0.99) -> UpdateDiagnostics:
    """One-step bandit A2C update.  The successor value term is zero unless
    ``bootstrap_value`` is supplied (manager_bootstrap=on)."""
    if not np.isfinite(reward):
        raise ad.NonFiniteError("non-finite extrinsic reward")
    v = net.value(state_rows)
    target = reward + (gamma * bootstrap_value if bootstrap_value is not None else 0.0)
    advantage = target - v.item()

    dist = option_distribution(state_rows)
    logp = _pick(ad.log(dist), option.flat_index)
    actor_obj = ad.mul(logp, advantage)
    err = ad.sub(Tensor(np.float64(target)), v)
    critic_loss = ad.mul(ad.mul(err, err), 0.5)
    loss = ad.add(ad.mul(actor_obj, -1.0), critic_loss)

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return UpdateDiagnostics(advantage=advantage, actor_loss=-actor_obj.item(),
                             critic_loss=critic_loss.item(), entropy=float("nan"))


def _pick(vec: Tensor, idx: int) -> Tensor:
    data = vec.data[idx]

    def bw(g):
        gv = np.zeros_like(vec.data)
        gv[idx] = g
        return (gv,)

    return Tensor(data, _parents=(vec,), _backward=bw)


def probabilities_matrix(probs: np.ndarray, n_assets: int) -> np.ndarray:
    """Scatter flat option probabilities into a symmetric matrix, zero diagonal."""
    mat = np.zeros((n_assets, n_assets))
    for k, p in enumerate(probs):
        i, j = flat_to_pair(k, n_assets)
        mat[i, j] = mat[j, i] = p
    return mat


def export_pair_probabilities(net: ManagerNet, table: PriceTable, formation: range,
                              path) -> np.ndarray:
    """Write pair_probs.csv: symmetric probability matrix with asset headers."""
    rows = encode_formation(table, formation, net.encoder)
    probs = option_distribution(rows).data
    mat = probabilities_matrix(probs, table.n_assets)
    write_prob_matrix_csv(path, mat, table.assets)
    return mat


def write_prob_matrix_csv(path, mat: np.ndarray, assets) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["asset", *assets])
        for a, row in zip(assets, mat):
            w.writerow([a, *[repr(x) for x in row]])
