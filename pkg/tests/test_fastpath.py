"""The compiled kernels must agree with the tape modules, which define the
reference semantics."""
import numpy as np
import pytest

import trials.autodiff as ad
import trials.fastpath as fp
from trials.autodiff import ParameterStore, Tensor
from trials.encoder import (attention_pool, bi_gru_encode, init_encoder_params)
from trials.market_data import PeriodSplit, PriceTable
from trials.trading_env import PairOption
from trials.trainer import TrainConfig, WorkerRuntime
from trials.worker import WorkerNet

from conftest import make_table


def small_encoder(seed=0, d_in=5, d_h=8, self_key=True):
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    params = init_encoder_params(store, "enc", d_in, d_h, rng, self_key=self_key)
    flat = fp.FlatParams(store)
    return store, params, flat.encoder_views("enc", self_key=self_key), flat


@pytest.mark.parametrize("self_key", [True, False])
def test_encode_window_matches_tape_forward(self_key):
    store, params, enc, _ = small_encoder(self_key=self_key)
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(7, 5))
    state, _ = fp.encode_window(xs, enc)
    window = [Tensor(x) for x in xs]
    hidden = bi_gru_encode(window, params)
    ref = attention_pool(hidden, len(window) - 1, params)
    np.testing.assert_allclose(state, ref.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("self_key", [True, False])
def test_encode_window_backward_matches_tape(self_key):
    store, params, enc, flat = small_encoder(seed=3, self_key=self_key)
    rng = np.random.default_rng(4)
    xs = rng.normal(size=(6, 5))
    probe = rng.normal(size=8)

    state, caches = fp.encode_window(xs, enc)
    gxs = fp.encode_window_backward(probe, caches, enc)

    window = [Tensor(x, requires_grad=True) for x in xs]
    hidden = bi_gru_encode(window, params)
    out = attention_pool(hidden, len(window) - 1, params)
    out.backward(seed=probe)

    for name, (off, shape) in flat.layout.items():
        got = flat.grad_views[name]
        want = store[name].grad
        np.testing.assert_allclose(got, want.reshape(got.shape),
                                   rtol=0, atol=1e-10, err_msg=name)
    for k, x in enumerate(window):
        np.testing.assert_allclose(gxs[k], x.grad, rtol=0, atol=1e-10)


def test_softmax_np_matches_tape():
    z = np.array([1.5, -0.2, 0.0, 3.0])
    ref = ad.softmax(Tensor(z)).data
    np.testing.assert_allclose(fp.softmax_np(z), ref, rtol=0, atol=1e-15)


def test_policy_logit_grad_finite_difference():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=3)
    adv, beta, a_idx = 0.7, 0.01, 2

    def loss(z):
        p = fp.softmax_np(z)
        return -adv * np.log(p[a_idx]) - beta * (-(p * np.log(p)).sum())

    dist = fp.softmax_np(logits)
    analytic = fp.policy_logit_grad(dist, a_idx, adv, beta)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (loss(logits + e) - loss(logits - e)) / (2 * h)
        assert abs(fd - analytic[k]) < 1e-8


def test_rmsprop_step_zero_lr_clears_grad_only():
    store, _, _, flat = small_encoder(seed=6)
    before = flat.flat.copy()
    flat.grad[:] = 1.23
    flat.rmsprop_step(0.0, 0.99, 1e-8)
    assert np.array_equal(flat.flat, before)
    assert np.all(flat.grad == 0.0)


def test_rmsprop_kernel_matches_tape_optimizer():
    rng = np.random.default_rng(8)
    store = ParameterStore()
    t = store.create("w", rng.normal(size=(4,)))
    t.grad[:] = rng.normal(size=4)
    opt = ad.RMSProp(store, lr=1e-3, rho=0.99, eps=1e-8)

    flat = np.array(t.data)
    grad = t.grad.copy()
    cache = np.zeros_like(flat)
    fp._rmsprop(flat, grad, cache, 1e-3, 0.99, 1e-8)
    opt.step()
    np.testing.assert_allclose(flat, t.data, rtol=0, atol=1e-15)
    assert np.all(grad == 0.0)


def episode_runtime(seed=0):
    table = make_table(n_assets=3, n_days=40, seed=11)
    cfg = TrainConfig(iterations=1, d_h=8, d_a=4, seed=seed, history_window=6)
    rng = np.random.default_rng(seed)
    net = WorkerNet.create(cfg.d_h, cfg.d_a, rng, history_window=cfg.history_window)
    return table, cfg, net


@pytest.mark.parametrize("mode", ["sample", "greedy"])
def test_fused_episode_matches_python_runner(mode):
    table, cfg, net = episode_runtime()
    pair = PairOption(0, 2, table.n_assets)
    period = range(5, 35)

    slow = WorkerRuntime(net, cfg)
    fast = WorkerRuntime(net, cfg)
    env, _, _ = slow.run_episode(pair, table, period,
                                 np.random.default_rng(42), mode=mode,
                                 update=True)
    rewards, act_idx, _, _ = fast.run_episode_fast(pair, table, period,
                                                   np.random.default_rng(42),
                                                   mode=mode, update=True)
    np.testing.assert_array_equal(np.array(env.rewards), rewards)
    # fastmath reassociation in the kernel permits ulp-level drift
    np.testing.assert_allclose(fast.params.flat, slow.params.flat,
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(fast.params.cache, slow.params.cache,
                               rtol=0, atol=1e-12)


def test_fused_episode_no_update_leaves_params(small_table):
    table, cfg, net = episode_runtime(seed=3)
    pair = PairOption(0, 1, table.n_assets)
    wkr = WorkerRuntime(net, cfg)
    before = wkr.params.flat.copy()
    wkr.run_episode_fast(pair, table, range(0, 30), None, mode="greedy",
                         update=False)
    assert np.array_equal(wkr.params.flat, before)


def test_flat_params_views_alias_flat_vector():
    store, _, _, flat = small_encoder(seed=9)
    name = next(iter(flat.views))
    flat.views[name].flat[0] = 123.0
    off, shape = flat.layout[name]
    assert flat.flat[off] == 123.0
