"""Observation encoders: Bi-GRU over a feature window plus scaled dot-product
temporal attention, pooled through LeakyReLU + LayerNorm.

Two variants share this code: the formation encoder (3 features per asset per
day, one shared Bi-GRU per asset, output = one latent row per asset) and the
trading-history encoder (account + pair features per step, output = one latent
vector for the current step).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, ParameterStore, Tensor
from .market_data import PriceTable, log_normalize
from .trading_env import ACTION_INDEX, TradeObservation


@dataclass
class EncoderParams:
    """Weights of one Bi-GRU + attention encoder.

    ``d_h`` is the concatenated hidden size (d_h/2 per direction); the worker
    variant carries an action-embedding table with exactly 3 rows.
    """
    fwd: GruParams
    bwd: GruParams
    w_c: Tensor        # (d_h, 2*d_h)
    ln_gain: Tensor    # (d_h,)
    ln_bias: Tensor    # (d_h,)
    d_h: int
    action_embed: Tensor | None = None  # (3, d_a)
    d_a: int = 0
    self_key: bool = True

    @property
    def d_in(self) -> int:
        return self.fwd.d_in


def init_encoder_params(store: ParameterStore, prefix: str, d_in: int, d_h: int,
                        rng: np.random.Generator, d_a: int = 0,
                        self_key: bool = True) -> EncoderParams:
    if d_h % 2 != 0:
        raise ad.ShapeError("d_h must be even (two directions)")
    half = d_h // 2
    fwd = ad.init_gru(store, f"{prefix}.gru_fwd", d_in, half, rng)
    bwd = ad.init_gru(store, f"{prefix}.gru_bwd", d_in, half, rng)
    w_c = store.create(f"{prefix}.w_c", ad.init_matrix(rng, d_h, 2 * d_h))
    ln_gain = store.create(f"{prefix}.ln_gain", np.ones(d_h))
    ln_bias = store.create(f"{prefix}.ln_bias", np.zeros(d_h))
    embed = None
    if d_a > 0:
        embed = store.create(f"{prefix}.action_embed", ad.init_matrix(rng, 3, d_a))
    return EncoderParams(fwd=fwd, bwd=bwd, w_c=w_c, ln_gain=ln_gain, ln_bias=ln_bias,
                        d_h=d_h, action_embed=embed, d_a=d_a, self_key=self_key)


@dataclass
class HiddenSequence:
    """Per-step concatenated forward+backward states."""
    states: list[Tensor]

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k: int) -> Tensor:
        return self.states[k]


def bi_gru_encode(window: list[Tensor], params: EncoderParams) -> HiddenSequence:
    """Forward scan left-to-right and backward scan right-to-left, both from
    zero initial state; per-step output is the concatenation of the two."""
    if not window:
        raise ad.ShapeError("empty window")
    half = params.d_h // 2
    h = Tensor(np.zeros(half))
    forward = []
    for x in window:
        h = ad.gru_cell(x, h, params.fwd)
        forward.append(h)
    h = Tensor(np.zeros(half))
    backward: list[Tensor | None] = [None] * len(window)
    for k in range(len(window) - 1, -1, -1):
        h = ad.gru_cell(window[k], h, params.bwd)
        backward[k] = h
    return HiddenSequence([ad.concat([f, b]) for f, b in zip(forward, backward)])


def attention_weights(hidden: HiddenSequence, query_index: int,
                      params: EncoderParams) -> tuple[Tensor, list[int]]:
    """Softmax attention over scaled dot-product scores; returns the weight
    vector and the key indices it covers."""
    if not 0 <= query_index < len(hidden):
        raise IndexError(f"query index {query_index} out of range")
    if params.self_key or query_index == 0:
        keys = list(range(query_index + 1))
    else:
        keys = list(range(query_index))
    q = hidden[query_index]
    scale = 1.0 / np.sqrt(params.d_h)
    scores = ad.concat([_as_vec1(ad.mul(ad.dot(q, hidden[k]), scale)) for k in keys])
    return ad.softmax(scores), keys


def _as_vec1(scalar: Tensor) -> Tensor:
    data = scalar.data.reshape(1)

    def bw(g):
        return (g.reshape(scalar.data.shape),)

    return Tensor(data, _parents=(scalar,), _backward=bw)


def attention_pool(hidden: HiddenSequence, query_index: int,
                   params: EncoderParams) -> Tensor:
    """Context vector from the attention weights, then
    LayerNorm(LeakyReLU(W_c [h_q, c]))."""
    alpha, keys = attention_weights(hidden, query_index, params)
    parts = [ad.mul(hidden[k], _alpha_entry(alpha, pos)) for pos, k in enumerate(keys)]
    context = parts[0]
    for p in parts[1:]:
        context = ad.add(context, p)
    q = hidden[query_index]
    u = ad.matmul(params.w_c, ad.concat([q, context]))
    return ad.layer_norm(ad.leaky_relu(u), params.ln_gain, params.ln_bias)


def _alpha_entry(alpha: Tensor, pos: int) -> Tensor:
    data = alpha.data[pos]

    def bw(g):
        ga = np.zeros_like(alpha.data)
        ga[pos] = g
        return (ga,)

    return Tensor(data, _parents=(alpha,), _backward=bw)


ManagerState = list  # N tensors of shape (d_h,)


def formation_features(table: PriceTable, formation: range) -> np.ndarray:
    """Log-normalized (open, close, volume) per asset per formation day,
    centered at the window's first day so the recurrent gates stay in their
    responsive range; shape (N, T_F, 3)."""
    norm = table if table.normalized else log_normalize(table)
    sl = slice(formation.start, formation.stop)
    feats = np.stack([norm.open[:, sl], norm.close[:, sl], norm.volume[:, sl]],
                     axis=2)
    return feats - feats[:, :1, :]


def encode_formation(table: PriceTable, formation: range,
                     params: EncoderParams) -> ManagerState:
    """One shared Bi-GRU per asset over its own (open, close, volume) sequence,
    attention-pooled at the final step; returns one latent row per asset."""
    if len(formation) == 0:
        raise ad.ShapeError("empty formation period")
    feats = formation_features(table, formation)
    rows = []
    for a in range(feats.shape[0]):
        window = [Tensor(feats[a, t]) for t in range(feats.shape[1])]
        hidden = bi_gru_encode(window, params)
        rows.append(attention_pool(hidden, len(hidden) - 1, params))
    return rows


def observation_features(obs: TradeObservation, params: EncoderParams) -> Tensor:
    """Feature vector for one trading step: embedded previous action, then
    cash / position value / net value, then both legs' price features."""
    if params.action_embed is None:
        raise ad.ShapeError("worker encoder needs an action embedding table")
    emb = ad.pick_row(params.action_embed, ACTION_INDEX[obs.account.prev_action])
    acct = Tensor(np.array([obs.account.cash, obs.account.position_value,
                            obs.account.net_value]))
    return ad.concat([emb, acct, Tensor(obs.prices)])


def encode_trading_history(history: list[TradeObservation], t: int,
                           params: EncoderParams,
                           window: int | None = None) -> Tensor:
    """Latent market state at step ``t`` from observations 0..t only.

    ``window`` truncates the encoded history to the most recent steps; the
    query is always the last (current) step, so causality holds either way.
    """
    if len(history) < t + 1:
        raise ad.ShapeError(f"history has {len(history)} steps, need {t + 1}")
    start = 0 if window is None else max(0, t + 1 - window)
    feats = [observation_features(history[k], params) for k in range(start, t + 1)]
    hidden = bi_gru_encode(feats, params)
    return attention_pool(hidden, len(hidden) - 1, params)


def export_attention_csv(path, rows: list[tuple[int, list[int], np.ndarray]],
                         n_steps: int) -> None:
    """Write one attention matrix: rows = query step, cols = key step."""
    mat = np.zeros((n_steps, n_steps))
    for q, keys, alpha in rows:
        for k, a in zip(keys, alpha):
            mat[q, k] = a
    np.savetxt(path, mat, delimiter=",")
