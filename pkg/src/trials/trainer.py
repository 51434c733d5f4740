"""Hierarchical training loop: sample a pair option, train the trading agent
on the formation period with per-step A2C updates, score it greedily on the
trading period, and update the pair-selection bandit on that profit.

Runs on the compiled fast path (:mod:`trials.fastpath`); the tape modules
define the reference semantics and the two are kept equivalent by tests.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import fastpath as fp
from .baselines import fit_spread_model, threshold_trade
from .encoder import formation_features
from .manager import ManagerNet, probabilities_matrix
from .market_data import PeriodSplit, PriceTable
from .metrics import MetricsReport, compute_report
from .trading_env import (ACTION_ORDER, EnvConfig, PairOption, PairTradingEnv,
                          TradeAction, episode_return, n_pairs)
from .worker import WorkerNet

GREEDY_TIE_ORDER = (1, 0, 2)  # prefer C, then L, then S among ties


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200          # manager loop bound M
    inner_episodes: int = 4        # worker episodes per option
    lr_manager: float = 1e-4
    lr_worker: float = 1e-4
    gamma: float = 0.99
    beta: float = 0.01             # worker entropy bonus
    cost: float = 0.001
    d_h: int = 64
    d_a: int = 8
    seed: int = 0
    manager_bootstrap: bool = False
    eval_cadence: int = 25
    history_window: int | None = 6  # ~ spread mean-reversion half-life in days
    rms_rho: float = 0.99
    rms_eps: float = 1e-8
    reset_worker_per_option: bool = False
    trade_mode: str = "rl"         # "rl" | "threshold" (selection-only ablation)
    k_open: float = 2.0
    k_close: float = 0.0
    spread_kind: str = "normalized-diff"

    def __post_init__(self):
        if self.iterations < 1 or self.inner_episodes < 1:
            raise ValueError("loop bounds must be >= 1")
        if self.lr_manager < 0 or self.lr_worker < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.trade_mode not in ("rl", "threshold"):
            raise ValueError("trade_mode must be rl or threshold")


@dataclass
class TrainRecord:
    iteration: int
    option_i: int
    option_j: int
    option_flat: int
    intrinsic_returns: list[float]
    extrinsic_reward: float
    advantage: float
    actor_loss: float
    critic_loss: float
    value: float
    wall_clock: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, rec: TrainRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self, path) -> None:
        """One JSON object per iteration.  Wall-clock is kept in memory only
        so identical runs produce byte-identical files."""
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records:
                d = asdict(rec)
                d.pop("wall_clock")
                f.write(json.dumps(d) + "\n")


@dataclass
class Snapshot:
    iteration: int
    manager_flat: np.ndarray
    worker_flat: np.ndarray


@dataclass
class TrainResult:
    manager: ManagerNet
    worker: WorkerNet
    log: TrainLog
    snapshots: list[Snapshot]
    config: TrainConfig


# -- fast-path runners ----------------------------------------------------

class ManagerRuntime:
    """Compiled-path view of a ManagerNet bound to one formation window."""

    def __init__(self, net: ManagerNet, table: PriceTable, formation: range,
                 cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.params = fp.FlatParams(net.store)
        self.enc = self.params.encoder_views("manager.enc",
                                             self_key=net.encoder.self_key)
        self.w_v = self.params.views["manager.w_v"]
        self.b_v = self.params.views["manager.b_v"]
        self.g_wv = self.params.grad_views["manager.w_v"]
        self.g_bv = self.params.grad_views["manager.b_v"]
        self.feats = formation_features(table, formation)
        self.n_assets = table.n_assets
        iu = np.triu_indices(self.n_assets, k=1)
        self._triu = iu

    def states(self):
        rows, caches = [], []
        for a in range(self.feats.shape[0]):
            s, c = fp.encode_window(np.ascontiguousarray(self.feats[a]), self.enc)
            rows.append(s)
            caches.append(c)
        return np.stack(rows), caches

    def option_probs(self, rows: np.ndarray) -> np.ndarray:
        gram = rows @ rows.T
        return fp.softmax_np(gram[self._triu])

    def value(self, rows: np.ndarray) -> float:
        return float(self.w_v @ rows.mean(axis=0) + self.b_v)

    def update(self, rows: np.ndarray, caches, option: PairOption,
               reward: float) -> dict:
        cfg = self.cfg
        v = self.value(rows)
        bootstrap = cfg.gamma * v if cfg.manager_bootstrap else 0.0
        target = reward + bootstrap
        adv = target - v
        probs = self.option_probs(rows)
        dlogits = fp.policy_logit_grad(probs, option.flat_index, adv, beta=0.0)
        n = self.n_assets
        drows = np.zeros_like(rows)
        iu_i, iu_j = self._triu
        for k in range(dlogits.size):
            i, j = iu_i[k], iu_j[k]
            drows[i] += dlogits[k] * rows[j]
            drows[j] += dlogits[k] * rows[i]
        dv = -(target - v)
        drows += dv * self.w_v / n
        self.g_wv += dv * rows.mean(axis=0)
        self.g_bv += dv
        for a in range(n):
            fp.encode_window_backward(drows[a], caches[a], self.enc)
        self.params.rmsprop_step(cfg.lr_manager, cfg.rms_rho, cfg.rms_eps)
        return {"advantage": adv, "value": v,
                "actor_loss": -adv * float(np.log(probs[option.flat_index])),
                "critic_loss": 0.5 * adv * adv}

    def sync(self) -> None:
        self.params.sync_to_store(self.net.store)


class WorkerRuntime:
    """Compiled-path view of a WorkerNet; runs full episodes with optional
    per-step A2C updates."""

    def __init__(self, net: WorkerNet, cfg: TrainConfig):
        self.net = net
        self.cfg = cfg
        self.params = fp.FlatParams(net.store)
        self.enc = self.params.encoder_views("worker.enc",
                                             self_key=net.encoder.self_key)
        v, g = self.params.views, self.params.grad_views
        self.w_pi = v["worker.w_pi"]
        self.b_pi = v["worker.b_pi"]
        self.w_v = v["worker.w_v"]
        self.b_v = v["worker.b_v"]
        self.e_a = v["worker.enc.action_embed"]
        self.g_wpi = g["worker.w_pi"]
        self.g_bpi = g["worker.b_pi"]
        self.g_wv = g["worker.w_v"]
        self.g_bv = g["worker.b_v"]
        self.g_ea = g["worker.enc.action_embed"]
        self.d_a = net.encoder.d_a
        self._init_flat = self.params.flat.copy()

    def reset_parameters(self) -> None:
        self.params.flat[:] = self._init_flat
        self.params.cache[:] = 0.0
        self.params.zero_grad()

    def _window_xs(self, act_idx, acct, prices, lo, hi):
        return np.concatenate(
            [self.e_a[act_idx[lo:hi]], acct[lo:hi], prices[lo:hi]], axis=1)

    def _apply_update(self, state, caches, dist, exec_idx, adv, act_win):
        cfg = self.cfg
        dlogits = fp.policy_logit_grad(dist, exec_idx, adv, cfg.beta)
        self.g_wpi += np.outer(dlogits, state)
        self.g_bpi += dlogits
        dstate = self.w_pi.T @ dlogits
        dv = -adv
        self.g_wv += dv * state
        self.g_bv += dv
        dstate = dstate + dv * self.w_v
        gxs = fp.encode_window_backward(dstate, caches, self.enc)
        np.add.at(self.g_ea, act_win, gxs[:, :self.d_a])
        self.params.rmsprop_step(cfg.lr_worker, cfg.rms_rho, cfg.rms_eps)

    def run_episode(self, pair: PairOption, table: PriceTable, period: range,
                    rng: np.random.Generator | None, mode: str = "sample",
                    update: bool = True, collect_attention: bool = False):
        """One pass over ``period``; returns the finished environment (rewards,
        actions, trajectory) plus per-step advantages.

        One forward pass per step: the A2C update for transition t-1 fires
        once step t's state (its bootstrap value) is encoded, so gradients are
        taken at the parameters that produced the action; the terminal
        transition (bootstrap 0) updates immediately.
        """
        cfg = self.cfg
        env = PairTradingEnv(pair, table, period, EnvConfig(cost=cfg.cost))
        env.reset()
        t_len = len(period)
        w = cfg.history_window or t_len
        act_idx = np.zeros(t_len, dtype=np.int64)
        act_idx[0] = 1  # previous action starts at C
        acct = np.zeros((t_len, 3))
        acct[0] = (1.0, 0.0, 1.0)
        prices = env._features
        uniforms = rng.random(t_len - 1) if mode == "sample" else None
        advantages = []
        attention = []
        prev = None
        for t in range(t_len - 1):
            lo = max(0, t + 1 - w)
            xs = self._window_xs(act_idx, acct, prices, lo, t + 1)
            state, caches = fp.encode_window(xs, self.enc)
            dist = fp.softmax_np(self.w_pi @ state + self.b_pi)
            value = float(self.w_v @ state + self.b_v)
            if update and prev is not None:
                p_state, p_caches, p_dist, p_exec, p_reward, p_value, p_win = prev
                target = p_reward + cfg.gamma * value
                adv = target - p_value
                advantages.append(adv)
                self._apply_update(p_state, p_caches, p_dist, p_exec, adv, p_win)
            if mode == "greedy":
                a_idx = GREEDY_TIE_ORDER[int(np.argmax(dist[list(GREEDY_TIE_ORDER)]))]
            else:
                c = np.cumsum(dist)
                a_idx = int(np.searchsorted(c, uniforms[t] * c[-1],
                                            side="right").clip(0, 2))
            _, reward, done = env.step(ACTION_ORDER[a_idx])
            executed = env.actions[-1]          # terminal step forces a clear
            exec_idx = ACTION_ORDER.index(executed)
            act_idx[t + 1] = exec_idx
            acct[t + 1] = (env.account.cash, env.account.position_value,
                           env.account.net_value)
            if collect_attention:
                alpha = caches[10]
                attention.append((t, list(range(lo, lo + alpha.size)), alpha.copy()))
            if update and done:
                adv = reward - value
                advantages.append(adv)
                self._apply_update(state, caches, dist, exec_idx, adv,
                                   act_idx[lo:t + 1])
            elif update:
                prev = (state, caches, dist, exec_idx, reward, value,
                        act_idx[lo:t + 1].copy())
        return env, advantages, attention

    def run_episode_fast(self, pair: PairOption, table: PriceTable,
                         period: range, rng: np.random.Generator | None,
                         mode: str = "sample", update: bool = True):
        """Same episode as run_episode executed by the fused compiled kernel;
        the two paths consume the rng identically and agree bitwise."""
        cfg = self.cfg
        env = PairTradingEnv(pair, table, period, EnvConfig(cost=cfg.cost))
        t_len = len(period)
        uniforms = rng.random(t_len - 1) if mode == "sample" else np.zeros(t_len - 1)
        p = self.params
        rewards, act_idx, acct, adv_sum = fp._episode_run(
            env._features, env._px_x, env._px_y, self.e_a,
            self.enc.fwd, self.enc.bwd, self.enc.g_fwd, self.enc.g_bwd,
            self.enc.w_c, self.enc.ln_gain, self.enc.ln_bias,
            self.enc.g_wc, self.enc.g_gain, self.enc.g_bias, self.enc.self_key,
            self.w_pi, self.b_pi, self.w_v, self.b_v.reshape(1),
            self.g_wpi, self.g_bpi, self.g_wv, self.g_bv.reshape(1), self.g_ea,
            p.flat, p.grad, p.cache,
            uniforms, mode == "greedy", update,
            cfg.history_window or 0, cfg.cost, cfg.gamma, cfg.beta,
            cfg.lr_worker if update else 0.0, cfg.rms_rho, cfg.rms_eps)
        return rewards, act_idx, acct, adv_sum

    def sync(self) -> None:
        self.params.sync_to_store(self.net.store)


# -- training -------------------------------------------------------------

def build_nets(cfg: TrainConfig) -> tuple[ManagerNet, WorkerNet]:
    rng = np.random.default_rng(cfg.seed)
    manager = ManagerNet.create(cfg.d_h, rng)
    worker = WorkerNet.create(cfg.d_h, cfg.d_a, rng,
                              history_window=cfg.history_window)
    return manager, worker


def train(table: PriceTable, split: PeriodSplit, cfg: TrainConfig) -> TrainResult:
    """Nested hierarchical loop; worker parameters persist across options
    unless reset_worker_per_option is set."""
    manager, worker = build_nets(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    mgr = ManagerRuntime(manager, table, split.formation, cfg)
    wkr = WorkerRuntime(worker, cfg)
    log = TrainLog()
    snapshots: list[Snapshot] = []
    n = table.n_assets

    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        rows, caches = mgr.states()
        probs = mgr.option_probs(rows)
        c = np.cumsum(probs)
        k = int(np.searchsorted(c, rng.random() * c[-1], side="right").clip(0, probs.size - 1))
        option = PairOption.from_flat(k, n)

        if cfg.reset_worker_per_option:
            wkr.reset_parameters()

        intrinsic = []
        if cfg.trade_mode == "rl":
            for _ in range(cfg.inner_episodes):
                rewards, _, _, _ = wkr.run_episode_fast(
                    option, table, split.formation, rng, mode="sample", update=True)
                intrinsic.append(episode_return(rewards).profit)
            rewards, _, _, _ = wkr.run_episode_fast(
                option, table, split.trading, None, mode="greedy", update=False)
            extrinsic = episode_return(rewards).profit
        else:
            model = fit_spread_model(table, option, split.formation,
                                     kind=cfg.spread_kind)
            if model.sigma <= 0:
                extrinsic = -1.0
            else:
                _, rewards = threshold_trade(option, model, table, split.trading,
                                             k_open=cfg.k_open, k_close=cfg.k_close,
                                             cost=cfg.cost)
                extrinsic = episode_return(rewards).profit

        diag = mgr.update(rows, caches, option, extrinsic)
        log.append(TrainRecord(
            iteration=it, option_i=option.i, option_j=option.j,
            option_flat=option.flat_index, intrinsic_returns=intrinsic,
            extrinsic_reward=extrinsic, advantage=diag["advantage"],
            actor_loss=diag["actor_loss"], critic_loss=diag["critic_loss"],
            value=diag["value"], wall_clock=time.perf_counter() - t0))
        if it % cfg.eval_cadence == 0 or it == cfg.iterations:
            snapshots.append(Snapshot(iteration=it,
                                      manager_flat=mgr.params.snapshot(),
                                      worker_flat=wkr.params.snapshot()))

    mgr.sync()
    wkr.sync()
    return TrainResult(manager=manager, worker=worker, log=log,
                       snapshots=snapshots, config=cfg)


# -- evaluation -----------------------------------------------------------

@dataclass
class EvaluationReport:
    pair: PairOption
    actions: list[str]
    rewards: list[float]
    metrics: MetricsReport
    episode_profit: float
    option_probs: np.ndarray


def greedy_option(manager: ManagerNet, table: PriceTable, formation: range,
                  cfg: TrainConfig) -> tuple[PairOption, np.ndarray]:
    mgr = ManagerRuntime(manager, table, formation, cfg)
    rows, _ = mgr.states()
    probs = mgr.option_probs(rows)
    return PairOption.from_flat(int(np.argmax(probs)), table.n_assets), probs


def evaluate(manager: ManagerNet, worker: WorkerNet, table: PriceTable,
             split: PeriodSplit, period: range, cfg: TrainConfig,
             export_dir=None) -> EvaluationReport:
    """Greedy option, greedy actions, metric set; mutates nothing."""
    option, probs = greedy_option(manager, table, split.formation, cfg)
    wkr = WorkerRuntime(worker, cfg)
    env, _, attention = wkr.run_episode(option, table, period, None,
                                        mode="greedy", update=False,
                                        collect_attention=export_dir is not None)
    rewards = list(env.rewards)
    report = compute_report(rewards, table=table, pair=option,
                            window=split.formation)
    if export_dir is not None:
        _export_eval(export_dir, env, option, table, probs, attention,
                     len(period), manager, split, cfg)
    return EvaluationReport(pair=option, actions=[a.name for a in env.actions],
                            rewards=rewards, metrics=report,
                            episode_profit=episode_return(rewards).profit,
                            option_probs=probs)


def _export_eval(export_dir, env, option, table, probs, attention, n_steps,
                 manager, split, cfg) -> None:
    import os

    from .encoder import export_attention_csv
    from .manager import write_prob_matrix_csv

    os.makedirs(export_dir, exist_ok=True)
    env.export_trajectory(os.path.join(export_dir, "trajectory.csv"))
    mat = probabilities_matrix(probs, table.n_assets)
    write_prob_matrix_csv(os.path.join(export_dir, "pair_probs.csv"), mat,
                          table.assets)
    name = f"{table.assets[option.i]}_{table.assets[option.j]}"
    export_attention_csv(os.path.join(export_dir, f"attention_{name}.csv"),
                         attention, n_steps)
    mgr = ManagerRuntime(manager, table, split.formation, cfg)
    for a in range(table.n_assets):
        _, caches = fp.encode_window(np.ascontiguousarray(mgr.feats[a]), mgr.enc)
        alpha = caches[10]
        t_f = mgr.feats.shape[1]
        export_attention_csv(
            os.path.join(export_dir, f"attention_{table.assets[a]}.csv"),
            [(t_f - 1, list(range(alpha.size)), alpha)], t_f)


def run_ablation_wo_tr(manager: ManagerNet, table: PriceTable, split: PeriodSplit,
                       period: range, cfg: TrainConfig) -> EvaluationReport:
    """Greedy RL pair selection composed with fixed-threshold trading."""
    option, probs = greedy_option(manager, table, split.formation, cfg)
    model = fit_spread_model(table, option, split.formation, kind=cfg.spread_kind)
    actions, rewards = threshold_trade(option, model, table, period,
                                       k_open=cfg.k_open, k_close=cfg.k_close,
                                       cost=cfg.cost)
    report = compute_report(rewards, table=table, pair=option,
                            window=split.formation)
    return EvaluationReport(pair=option, actions=[a.name for a in actions],
                            rewards=rewards, metrics=report,
                            episode_profit=episode_return(rewards).profit,
                            option_probs=probs)


def train_worker_on_pair(table: PriceTable, split: PeriodSplit, pair: PairOption,
                         cfg: TrainConfig) -> tuple[WorkerNet, list[Snapshot], TrainLog]:
    """RL trading on a fixed, externally selected pair (no manager); the same
    episode budget as the hierarchical loop."""
    rng_init = np.random.default_rng(cfg.seed)
    worker = WorkerNet.create(cfg.d_h, cfg.d_a, rng_init,
                              history_window=cfg.history_window)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    wkr = WorkerRuntime(worker, cfg)
    log = TrainLog()
    snapshots = []
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        intrinsic = []
        for _ in range(cfg.inner_episodes):
            rewards, _, _, _ = wkr.run_episode_fast(
                pair, table, split.formation, rng, mode="sample", update=True)
            intrinsic.append(episode_return(rewards).profit)
        log.append(TrainRecord(iteration=it, option_i=pair.i, option_j=pair.j,
                               option_flat=pair.flat_index,
                               intrinsic_returns=intrinsic, extrinsic_reward=0.0,
                               advantage=0.0, actor_loss=0.0, critic_loss=0.0,
                               value=0.0,
                               wall_clock=time.perf_counter() - t0))
        if it % cfg.eval_cadence == 0 or it == cfg.iterations:
            snapshots.append(Snapshot(iteration=it, manager_flat=np.zeros(0),
                                      worker_flat=wkr.params.snapshot()))
    wkr.sync()
    return worker, snapshots, log


def evaluate_worker_on_pair(worker: WorkerNet, table: PriceTable, pair: PairOption,
                            period: range, cfg: TrainConfig,
                            formation: range | None = None) -> EvaluationReport:
    wkr = WorkerRuntime(worker, cfg)
    env, _, _ = wkr.run_episode(pair, table, period, None, mode="greedy",
                                update=False)
    rewards = list(env.rewards)
    report = compute_report(rewards, table=table, pair=pair,
                            window=formation or period)
    return EvaluationReport(pair=pair, actions=[a.name for a in env.actions],
                            rewards=rewards, metrics=report,
                            episode_profit=episode_return(rewards).profit,
                            option_probs=np.zeros(n_pairs(table.n_assets)))
