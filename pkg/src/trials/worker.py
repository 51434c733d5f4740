"""Low-level A2C trading agent: softmax policy and value head over the
trading-history latent state, with per-transition advantage updates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, RMSProp, Tensor
from .encoder import EncoderParams, encode_trading_history, init_encoder_params
from .trading_env import ACTION_ORDER, TradeAction

# worker input features: action embedding + (cash, position, net) + 6 price features
N_ACCOUNT_FEATURES = 3
N_PRICE_FEATURES = 6


@dataclass
class WorkerNet:
    """Shared encoder with separate policy (W_pi) and value heads."""
    store: ParameterStore
    encoder: EncoderParams
    w_pi: Tensor   # (3, d_h)
    b_pi: Tensor   # (3,)
    w_v: Tensor    # (d_h,)
    b_v: Tensor    # scalar
    history_window: int | None = None

    @classmethod
    def create(cls, d_h: int, d_a: int, rng: np.random.Generator,
               history_window: int | None = None) -> "WorkerNet":
        store = ParameterStore()
        d_in = d_a + N_ACCOUNT_FEATURES + N_PRICE_FEATURES
        enc = init_encoder_params(store, "worker.enc", d_in, d_h, rng, d_a=d_a)
        w_pi = store.create("worker.w_pi", ad.init_matrix(rng, 3, d_h))
        b_pi = store.create("worker.b_pi", np.zeros(3))
        w_v = store.create("worker.w_v", ad.init_matrix(rng, 1, d_h)[0])
        b_v = store.create("worker.b_v", np.zeros(()))
        return cls(store=store, encoder=enc, w_pi=w_pi, b_pi=b_pi, w_v=w_v, b_v=b_v,
                   history_window=history_window)

    def encode(self, history, t: int) -> Tensor:
        return encode_trading_history(history, t, self.encoder,
                                      window=self.history_window)

    def value(self, state: Tensor) -> Tensor:
        return ad.add(ad.dot(self.w_v, state), self.b_v)


def action_distribution(state: Tensor, net: WorkerNet) -> Tensor:
    """softmax(W_pi s + b) over (L, C, S)."""
    return ad.softmax(ad.add(ad.matmul(net.w_pi, state), net.b_pi))


def act(dist, mode: str, rng: np.random.Generator | None = None) -> TradeAction:
    """sample: categorical draw; greedy: argmax with ties broken C, L, S."""
    p = dist.data if isinstance(dist, Tensor) else np.asarray(dist, float)
    if mode == "greedy":
        # ACTION_ORDER is (L, C, S); ties break toward C, then L, then S
        order = (1, 0, 2)
        best = order[int(np.argmax([p[k] for k in order]))]
        return ACTION_ORDER[best]
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        u = rng.random()
        c = np.cumsum(p)
        return ACTION_ORDER[int(np.searchsorted(c, u * c[-1], side="right").clip(0, 2))]
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class UpdateDiagnostics:
    advantage: float
    actor_loss: float
    critic_loss: float
    entropy: float


@dataclass
class Transition:
    """One step of a live episode; ``state`` carries the live tape graph,
    ``next_value`` is the critic's no-grad estimate of the successor state."""
    state: Tensor
    action: TradeAction
    reward: float
    next_value: float
    done: bool


def worker_update(transition: Transition, net: WorkerNet, gamma: float,
                  optimizer: RMSProp, beta: float = 0.01) -> UpdateDiagnostics:
    """One A2C step: advantage from the frozen successor value, policy-gradient
    step on log pi(a|s) (plus entropy bonus) and half-squared-error critic step."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    s = transition.state
    dist = action_distribution(s, net)
    v = net.value(s)
    target = transition.reward + gamma * transition.next_value * (0.0 if transition.done else 1.0)
    advantage = target - v.item()

    a_idx = ACTION_ORDER.index(transition.action)
    log_dist = ad.log(dist)
    logp = _pick(log_dist, a_idx)
    entropy = ad.mul(ad.tsum(ad.mul(dist, log_dist)), -1.0)
    actor_obj = ad.add(ad.mul(logp, advantage), ad.mul(entropy, beta))
    critic_err = ad.sub(Tensor(np.float64(target)), v)
    critic_loss = ad.mul(ad.mul(critic_err, critic_err), 0.5)
    loss = ad.add(ad.mul(actor_obj, -1.0), critic_loss)
    if not np.isfinite(loss.item()):
        raise ad.NonFiniteError("non-finite A2C loss")

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return UpdateDiagnostics(advantage=advantage, actor_loss=-actor_obj.item(),
                             critic_loss=critic_loss.item(), entropy=entropy.item())


def _pick(vec: Tensor, idx: int) -> Tensor:
    data = vec.data[idx]

    def bw(g):
        gv = np.zeros_like(vec.data)
        gv[idx] = g
        return (gv,)

    return Tensor(data, _parents=(vec,), _backward=bw)


def episode_loss(states: list[Tensor], actions: list[TradeAction],
                 rewards: list[float], values_next: list[float], net: WorkerNet,
                 gamma: float, beta: float = 0.0,
                 baselines: list[float] | None = None) -> Tensor:
    """Summed A2C loss over an episode with frozen targets; used by the
    finite-difference gradient checks.

    ``baselines`` fixes the advantage baseline V(s_k) externally so the loss
    is a pure function of the parameters under perturbation; by default the
    live critic value is detached in place.
    """
    total = Tensor(np.zeros(()))
    for k, (s, a, r, vn) in enumerate(zip(states, actions, rewards, values_next)):
        done = k == len(states) - 1
        dist = action_distribution(s, net)
        v = net.value(s)
        target = r + gamma * vn * (0.0 if done else 1.0)
        adv_const = target - (float(v.data) if baselines is None else baselines[k])
        log_dist = ad.log(dist)
        logp = _pick(log_dist, ACTION_ORDER.index(a))
        entropy = ad.mul(ad.tsum(ad.mul(dist, log_dist)), -1.0)
        actor_obj = ad.add(ad.mul(logp, adv_const), ad.mul(entropy, beta))
        err = ad.sub(Tensor(np.float64(target)), v)
        total = ad.add(total, ad.add(ad.mul(actor_obj, -1.0),
                                     ad.mul(ad.mul(err, err), 0.5)))
    return total
