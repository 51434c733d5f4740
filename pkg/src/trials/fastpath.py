"""Compiled hot path for training.

The tape in :mod:`trials.autodiff` is the reference implementation; these
numba kernels compute the identical encoder forward pass and analytic
gradients on flat parameter vectors, so per-step A2C updates run at compiled
speed.  Equivalence against the tape is covered by tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

FASTMATH = {"reassoc", "contract", "nsz", "arcp"}

from .autodiff import ParameterStore

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5


@njit(cache=True, fastmath=FASTMATH)
def _gru_scan(xs, wz, uz, bz, wr, ur, br, wh, uh, bh, reverse):
    """GRU over xs (T, d_in); returns per-step h, z, r, candidate caches.

    Input projections are batched into three gemms up front; only the
    recurrent part runs step by step.
    """
    t_len = xs.shape[0]
    d = bz.shape[0]
    h = np.zeros((t_len, d))
    zc = np.zeros((t_len, d))
    rc = np.zeros((t_len, d))
    cc = np.zeros((t_len, d))
    px_z = xs @ wz.T
    px_r = xs @ wr.T
    px_h = xs @ wh.T
    hprev = np.zeros(d)
    rh = np.empty(d)
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        for i in range(d):
            az = px_z[t, i] + bz[i]
            ar = px_r[t, i] + br[i]
            for j in range(d):
                az += uz[i, j] * hprev[j]
                ar += ur[i, j] * hprev[j]
            zc[t, i] = 1.0 / (1.0 + np.exp(-az))
            rc[t, i] = 1.0 / (1.0 + np.exp(-ar))
        for j in range(d):
            rh[j] = rc[t, j] * hprev[j]
        for i in range(d):
            ah = px_h[t, i] + bh[i]
            for j in range(d):
                ah += uh[i, j] * rh[j]
            hc = np.tanh(ah)
            cc[t, i] = hc
            z = zc[t, i]
            h[t, i] = (1.0 - z) * hprev[i] + z * hc
        hprev = h[t]
    return h, zc, rc, cc


@njit(cache=True, fastmath=FASTMATH)
def _gru_scan_backward(xs, h, zc, rc, cc, wz, uz, bz, wr, ur, br, wh, uh, bh,
                       dh_seq, reverse,
                       gwz, guz, gbz, gwr, gur, gbr, gwh, guh, gbh, gxs):
    """BPTT for one direction; dh_seq is the incoming per-step gradient.
    Accumulates parameter gradients and input gradients in place."""
    t_len = xs.shape[0]
    d = bz.shape[0]
    d_in = xs.shape[1]
    zero = np.zeros(d)
    carry = np.zeros(d)
    da_z = np.empty(d)
    da_r = np.empty(d)
    da_hc = np.empty(d)
    dhp = np.empty(d)
    order = range(t_len) if reverse else range(t_len - 1, -1, -1)
    for t in order:
        if reverse:
            hprev = h[t + 1] if t + 1 < t_len else zero
        else:
            hprev = h[t - 1] if t > 0 else zero
        x = xs[t]
        z = zc[t]
        r = rc[t]
        hc = cc[t]
        for i in range(d):
            dh = dh_seq[t, i] + carry[i]
            dhc = dh * z[i]
            da_hc[i] = dhc * (1.0 - hc[i] * hc[i])
            da_z[i] = dh * (hc[i] - hprev[i]) * z[i] * (1.0 - z[i])
            dhp[i] = dh * (1.0 - z[i])
        # tmp = uh.T @ da_hc feeds both the reset-gate grad and the carry
        for i in range(d):
            a_h = da_hc[i]
            a_z = da_z[i]
            gbh[i] += a_h
            gbz[i] += a_z
            for j in range(d_in):
                gwh[i, j] += a_h * x[j]
                gwz[i, j] += a_z * x[j]
            for j in range(d):
                guh[i, j] += a_h * r[j] * hprev[j]
                guz[i, j] += a_z * hprev[j]
        for j in range(d):
            tmp_j = 0.0
            uz_j = 0.0
            for i in range(d):
                tmp_j += uh[i, j] * da_hc[i]
                uz_j += uz[i, j] * da_z[i]
            da_r[j] = (tmp_j * hprev[j]) * r[j] * (1.0 - r[j])
            dhp[j] += tmp_j * r[j] + uz_j
        for i in range(d):
            a_r = da_r[i]
            gbr[i] += a_r
            for j in range(d_in):
                gwr[i, j] += a_r * x[j]
            for j in range(d):
                gur[i, j] += a_r * hprev[j]
        for j in range(d):
            ur_j = 0.0
            for i in range(d):
                ur_j += ur[i, j] * da_r[i]
            dhp[j] += ur_j
        for j in range(d_in):
            dx_j = 0.0
            for i in range(d):
                dx_j += (wh[i, j] * da_hc[i] + wz[i, j] * da_z[i]
                         + wr[i, j] * da_r[i])
            gxs[t, j] += dx_j
        for i in range(d):
            carry[i] = dhp[i]


@njit(cache=True, fastmath=FASTMATH)
def _attention_head(hcat, w_c, ln_gain, ln_bias, self_key):
    """Attention pool with query at the final step, then W_c + LeakyReLU + LN."""
    t_len, d_h = hcat.shape
    q = hcat[t_len - 1]
    n_keys = t_len if self_key or t_len == 1 else t_len - 1
    scale = 1.0 / np.sqrt(d_h)
    scores = np.empty(n_keys)
    for k in range(n_keys):
        scores[k] = np.dot(q, hcat[k]) * scale
    m = scores.max()
    e = np.exp(scores - m)
    alpha = e / e.sum()
    context = np.zeros(d_h)
    for k in range(n_keys):
        context += alpha[k] * hcat[k]
    v = np.concatenate((q, context))
    u = w_c @ v
    lr = np.where(u >= 0.0, u, LEAKY_SLOPE * u)
    mu = lr.mean()
    xc = lr - mu
    var = (xc * xc).mean()
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    state = xhat * ln_gain + ln_bias
    return state, alpha, context, u, xhat, inv


@njit(cache=True, fastmath=FASTMATH)
def _attention_head_backward(dstate, hcat, w_c, ln_gain, alpha, context, u,
                             xhat, inv, self_key, g_wc, g_gain, g_bias, dh_seq):
    t_len, d_h = hcat.shape
    q = hcat[t_len - 1]
    n_keys = alpha.shape[0]
    scale = 1.0 / np.sqrt(d_h)
    # layer norm
    gx = dstate * ln_gain
    m1 = gx.mean()
    m2 = (gx * xhat).mean()
    dlr = inv * (gx - m1 - xhat * m2)
    g_gain += dstate * xhat
    g_bias += dstate
    # leaky relu
    du = np.where(u >= 0.0, dlr, LEAKY_SLOPE * dlr)
    # u = w_c @ [q, c]; fuse the weight-grad outer product with dv = w_c.T @ du
    v = np.concatenate((q, context))
    dv = np.zeros(2 * d_h)
    for i in range(d_h):
        du_i = du[i]
        for j in range(2 * d_h):
            g_wc[i, j] += du_i * v[j]
            dv[j] += w_c[i, j] * du_i
    dq = dv[:d_h].copy()
    dc = dv[d_h:]
    # context and softmax
    dalpha = np.empty(n_keys)
    for k in range(n_keys):
        dalpha[k] = np.dot(dc, hcat[k])
        dh_seq[k] += alpha[k] * dc
    dscores = alpha * (dalpha - np.dot(dalpha, alpha))
    for k in range(n_keys):
        dq += dscores[k] * scale * hcat[k]
        dh_seq[k] += dscores[k] * scale * q
    dh_seq[t_len - 1] += dq


@njit(cache=True, fastmath=FASTMATH)
def _rmsprop(flat, grad, cache, lr, rho, eps):
    for k in range(flat.shape[0]):
        g = grad[k]
        cache[k] = rho * cache[k] + (1.0 - rho) * g * g
        flat[k] -= lr * g / (np.sqrt(cache[k]) + eps)
        grad[k] = 0.0


# -- python-side wrappers -------------------------------------------------

@dataclass
class EncoderViews:
    """Views into the flat parameter / gradient vectors for one encoder."""
    fwd: tuple
    bwd: tuple
    w_c: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    g_fwd: tuple
    g_bwd: tuple
    g_wc: np.ndarray
    g_gain: np.ndarray
    g_bias: np.ndarray
    self_key: bool


class FlatParams:
    """Flat mirrors of a ParameterStore: value, gradient, RMSProp cache."""

    GRU_TAGS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

    def __init__(self, store: ParameterStore):
        self.layout = store.layout()
        self.flat = store.pack()
        self.grad = np.zeros_like(self.flat)
        self.cache = np.zeros_like(self.flat)
        self.views = {}
        self.grad_views = {}
        for name, (off, shape) in self.layout.items():
            n = int(np.prod(shape)) if shape else 1
            self.views[name] = self.flat[off:off + n].reshape(shape)
            self.grad_views[name] = self.grad[off:off + n].reshape(shape)

    def encoder_views(self, prefix: str, self_key: bool = True) -> EncoderViews:
        def gru(tag, table):
            return tuple(table[f"{prefix}.{tag}.{t}"] for t in self.GRU_TAGS)

        return EncoderViews(
            fwd=gru("gru_fwd", self.views), bwd=gru("gru_bwd", self.views),
            w_c=self.views[f"{prefix}.w_c"], ln_gain=self.views[f"{prefix}.ln_gain"],
            ln_bias=self.views[f"{prefix}.ln_bias"],
            g_fwd=gru("gru_fwd", self.grad_views), g_bwd=gru("gru_bwd", self.grad_views),
            g_wc=self.grad_views[f"{prefix}.w_c"],
            g_gain=self.grad_views[f"{prefix}.ln_gain"],
            g_bias=self.grad_views[f"{prefix}.ln_bias"],
            self_key=self_key)

    def sync_to_store(self, store: ParameterStore) -> None:
        store.load_flat(self.flat)

    def rmsprop_step(self, lr: float, rho: float, eps: float) -> None:
        if lr == 0.0:
            self.grad[:] = 0.0
            return
        _rmsprop(self.flat, self.grad, self.cache, lr, rho, eps)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def snapshot(self) -> np.ndarray:
        return self.flat.copy()


def encode_window(xs: np.ndarray, enc: EncoderViews):
    """Forward pass: Bi-GRU over xs then attention head; returns the latent
    state plus the caches the backward pass needs."""
    hf, zf, rf, cf = _gru_scan(xs, *enc.fwd, False)
    hb, zb, rb, cb = _gru_scan(xs, *enc.bwd, True)
    hcat = np.concatenate((hf, hb), axis=1)
    state, alpha, context, u, xhat, inv = _attention_head(
        hcat, enc.w_c, enc.ln_gain, enc.ln_bias, enc.self_key)
    caches = (xs, hf, zf, rf, cf, hb, zb, rb, cb, hcat, alpha, context, u, xhat, inv)
    return state, caches


def encode_window_backward(dstate: np.ndarray, caches, enc: EncoderViews) -> np.ndarray:
    """Accumulate encoder gradients for one window; returns d(inputs)."""
    xs, hf, zf, rf, cf, hb, zb, rb, cb, hcat, alpha, context, u, xhat, inv = caches
    t_len, d_in = xs.shape
    dh_seq = np.zeros_like(hcat)
    _attention_head_backward(dstate, hcat, enc.w_c, enc.ln_gain, alpha, context,
                             u, xhat, inv, enc.self_key, enc.g_wc, enc.g_gain,
                             enc.g_bias, dh_seq)
    half = hf.shape[1]
    gxs = np.zeros((t_len, d_in))
    _gru_scan_backward(xs, hf, zf, rf, cf, *enc.fwd,
                       np.ascontiguousarray(dh_seq[:, :half]), False,
                       *enc.g_fwd, gxs)
    _gru_scan_backward(xs, hb, zb, rb, cb, *enc.bwd,
                       np.ascontiguousarray(dh_seq[:, half:]), True,
                       *enc.g_bwd, gxs)
    return gxs


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def policy_logit_grad(dist: np.ndarray, action_index: int, advantage: float,
                      beta: float) -> np.ndarray:
    """d/dlogits of [-A log pi(a) - beta H]."""
    e = np.zeros_like(dist)
    e[action_index] = 1.0
    dl = -advantage * (e - dist)
    if beta:
        logp = np.log(dist)
        h = -np.dot(dist, logp)
        dl += beta * dist * (logp + h)
    return dl


@njit(cache=True, fastmath=FASTMATH)
def _a2c_update(xs, hf, zf, rf, cf, hb, zb, rb, cb, hcat, alpha, context, u,
                xhat, inv, state, dist, exec_idx, adv, beta,
                fwd, bwd, g_fwd, g_bwd, w_c, ln_gain, g_wc, g_gain, g_bias,
                self_key, w_pi, w_v, g_wpi, g_bpi, g_wv, g_bv, g_ea,
                act_win, d_a, flat, grad, cache, lr, rho, eps):
    """One per-transition A2C update from cached forward-pass tensors."""
    d_h = state.shape[0]
    half = hf.shape[1]
    n = xs.shape[0]
    dl = np.empty(3)
    for k in range(3):
        e_k = 1.0 if k == exec_idx else 0.0
        dl[k] = -adv * (e_k - dist[k])
    if beta != 0.0:
        logp = np.log(dist)
        h_ent = -np.dot(dist, logp)
        for k in range(3):
            dl[k] += beta * dist[k] * (logp[k] + h_ent)
    dstate = np.empty(d_h)
    dv = -adv
    for j in range(d_h):
        s_j = state[j]
        g_wpi[0, j] += dl[0] * s_j
        g_wpi[1, j] += dl[1] * s_j
        g_wpi[2, j] += dl[2] * s_j
        g_wv[j] += dv * s_j
        dstate[j] = (w_pi[0, j] * dl[0] + w_pi[1, j] * dl[1]
                     + w_pi[2, j] * dl[2] + dv * w_v[j])
    g_bpi += dl
    g_bv[0] += dv
    dh_seq = np.zeros((n, d_h))
    _attention_head_backward(dstate, hcat, w_c, ln_gain, alpha, context, u,
                             xhat, inv, self_key, g_wc, g_gain, g_bias, dh_seq)
    gxs = np.zeros((n, xs.shape[1]))
    _gru_scan_backward(xs, hf, zf, rf, cf, fwd[0], fwd[1], fwd[2], fwd[3],
                       fwd[4], fwd[5], fwd[6], fwd[7], fwd[8],
                       np.ascontiguousarray(dh_seq[:, :half]), False,
                       g_fwd[0], g_fwd[1], g_fwd[2], g_fwd[3], g_fwd[4],
                       g_fwd[5], g_fwd[6], g_fwd[7], g_fwd[8], gxs)
    _gru_scan_backward(xs, hb, zb, rb, cb, bwd[0], bwd[1], bwd[2], bwd[3],
                       bwd[4], bwd[5], bwd[6], bwd[7], bwd[8],
                       np.ascontiguousarray(dh_seq[:, half:]), True,
                       g_bwd[0], g_bwd[1], g_bwd[2], g_bwd[3], g_bwd[4],
                       g_bwd[5], g_bwd[6], g_bwd[7], g_bwd[8], gxs)
    for k in range(n):
        row = act_win[k]
        for j in range(d_a):
            g_ea[row, j] += gxs[k, j]
    if lr == 0.0:
        for k in range(grad.shape[0]):
            grad[k] = 0.0
    else:
        _rmsprop(flat, grad, cache, lr, rho, eps)


@njit(cache=True)
def _episode_run(feats, px_x, px_y, e_a,
                 fwd, bwd, g_fwd, g_bwd,
                 w_c, ln_gain, ln_bias, g_wc, g_gain, g_bias, self_key,
                 w_pi, b_pi, w_v, b_v, g_wpi, g_bpi, g_wv, g_bv, g_ea,
                 flat, grad, cache,
                 uniforms, greedy, update, window,
                 cost, gamma, beta, lr, rho, eps):
    """Whole trading episode in one call: windowed encode, softmax policy,
    environment accounting, and per-transition A2C updates.

    One forward pass per step: the update for transition t-1 fires when
    step t's state (its bootstrap value) has been encoded, so its gradients
    are taken at exactly the parameters that produced action a_{t-1}, and the
    stop-gradient target V(s_t) at the parameters current when it is known.
    The terminal transition (v_next = 0) updates immediately.
    w_v / b_v are passed as length-d_h / length-1 arrays.
    """
    t_len = feats.shape[0]
    d_a = e_a.shape[1]
    d_in = d_a + 3 + feats.shape[1]
    d_h = ln_gain.shape[0]
    half = d_h // 2
    w = window if window > 0 else t_len
    act_idx = np.zeros(t_len, np.int64)
    act_idx[0] = 1
    acct = np.zeros((t_len, 3))
    acct[0, 0] = 1.0
    acct[0, 2] = 1.0
    rewards = np.zeros(t_len - 1)
    adv_sum = 0.0
    # previous-step caches for the delayed update
    p_valid = False
    p_xs = np.empty((0, d_in))
    p_hf = np.empty((0, half))
    p_zf = np.empty((0, half))
    p_rf = np.empty((0, half))
    p_cf = np.empty((0, half))
    p_hb = np.empty((0, half))
    p_zb = np.empty((0, half))
    p_rb = np.empty((0, half))
    p_cb = np.empty((0, half))
    p_hcat = np.empty((0, d_h))
    p_alpha = np.empty(0)
    p_context = np.empty(0)
    p_u = np.empty(0)
    p_xhat = np.empty(0)
    p_inv = 0.0
    p_state = np.empty(0)
    p_dist = np.empty(0)
    p_act_win = np.empty(0, np.int64)
    p_exec = 0
    p_reward = 0.0
    p_value = 0.0
    for t in range(t_len - 1):
        lo = t + 1 - w
        if lo < 0:
            lo = 0
        n = t + 1 - lo
        xs = np.empty((n, d_in))
        for k in range(n):
            idx = lo + k
            xs[k, :d_a] = e_a[act_idx[idx]]
            xs[k, d_a:d_a + 3] = acct[idx]
            xs[k, d_a + 3:] = feats[idx]
        hf, zf, rf, cf = _gru_scan(xs, fwd[0], fwd[1], fwd[2], fwd[3], fwd[4],
                                   fwd[5], fwd[6], fwd[7], fwd[8], False)
        hb, zb, rb, cb = _gru_scan(xs, bwd[0], bwd[1], bwd[2], bwd[3], bwd[4],
                                   bwd[5], bwd[6], bwd[7], bwd[8], True)
        hcat = np.empty((n, d_h))
        hcat[:, :half] = hf
        hcat[:, half:] = hb
        state, alpha, context, u, xhat, inv = _attention_head(
            hcat, w_c, ln_gain, ln_bias, self_key)
        logits = w_pi @ state + b_pi
        m = logits.max()
        e = np.exp(logits - m)
        dist = e / e.sum()
        value = w_v @ state + b_v[0]
        if update and p_valid:
            # transition t-1: bootstrap value just became available
            target = p_reward + gamma * value
            adv = target - p_value
            adv_sum += adv
            _a2c_update(p_xs, p_hf, p_zf, p_rf, p_cf, p_hb, p_zb, p_rb, p_cb,
                        p_hcat, p_alpha, p_context, p_u, p_xhat, p_inv,
                        p_state, p_dist, p_exec, adv, beta,
                        fwd, bwd, g_fwd, g_bwd, w_c, ln_gain, g_wc, g_gain,
                        g_bias, self_key, w_pi, w_v, g_wpi, g_bpi, g_wv, g_bv,
                        g_ea, p_act_win, d_a, flat, grad, cache, lr, rho, eps)
        if greedy:
            a_idx = 1
            if dist[0] > dist[a_idx]:
                a_idx = 0
            if dist[2] > dist[a_idx]:
                a_idx = 2
        else:
            c0 = dist[0]
            c1 = c0 + dist[1]
            c2 = c1 + dist[2]
            x = uniforms[t] * c2
            a_idx = 0
            if c0 <= x:
                a_idx = 1
            if c1 <= x:
                a_idx = 2
        terminal = t == t_len - 2
        exec_idx = 1 if terminal else a_idx
        prev_val = 1.0 - act_idx[t]
        a_val = 1.0 - exec_idx
        rx = px_x[t + 1] / px_x[t] - 1.0
        ry = px_y[t + 1] / px_y[t] - 1.0
        reward = prev_val * (rx - ry) - cost * abs(a_val - prev_val)
        net = acct[t, 2] * (1.0 + reward)
        if exec_idx != act_idx[t] or exec_idx == 1:
            cash = net
            pos = 0.0
        else:
            cash = acct[t, 0]
            pos = net - cash
        rewards[t] = reward
        act_idx[t + 1] = exec_idx
        acct[t + 1, 0] = cash
        acct[t + 1, 1] = pos
        acct[t + 1, 2] = net
        if update and terminal:
            adv = reward - value
            adv_sum += adv
            _a2c_update(xs, hf, zf, rf, cf, hb, zb, rb, cb, hcat, alpha,
                        context, u, xhat, inv, state, dist, exec_idx, adv,
                        beta, fwd, bwd, g_fwd, g_bwd, w_c, ln_gain, g_wc,
                        g_gain, g_bias, self_key, w_pi, w_v, g_wpi, g_bpi,
                        g_wv, g_bv, g_ea, act_idx[lo:t + 1], d_a,
                        flat, grad, cache, lr, rho, eps)
        elif update:
            p_valid = True
            p_xs = xs
            p_hf = hf
            p_zf = zf
            p_rf = rf
            p_cf = cf
            p_hb = hb
            p_zb = zb
            p_rb = rb
            p_cb = cb
            p_hcat = hcat
            p_alpha = alpha
            p_context = context
            p_u = u
            p_xhat = xhat
            p_inv = inv
            p_state = state
            p_dist = dist
            p_act_win = act_idx[lo:t + 1].copy()
            p_exec = exec_idx
            p_reward = reward
            p_value = value
    return rewards, act_idx, acct, adv_sum
