"""Finite-difference checks for every tape primitive plus optimizer and
parameter-store behavior."""
import numpy as np
import pytest

import trials.autodiff as ad
from trials.autodiff import (GruParams, ParameterStore, RMSProp, Tensor,
                             grad_check, gru_cell, init_gru)


def make_store(seed, shapes):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in shapes.items():
        store.create(name, rng.normal(0.0, 0.5, size=shape))
    return store


PRIMITIVE_CASES = {
    "add": ({"a": (4,), "b": (4,)},
            lambda s: ad.tsum(ad.add(s["a"], s["b"]))),
    "sub": ({"a": (4,), "b": (4,)},
            lambda s: ad.tsum(ad.sub(ad.mul(s["a"], 2.0), s["b"]))),
    "mul": ({"a": (4,), "b": (4,)},
            lambda s: ad.tsum(ad.mul(s["a"], s["b"]))),
    "matmul": ({"w": (3, 4), "x": (4,)},
               lambda s: ad.tsum(ad.matmul(s["w"], s["x"]))),
    "dot": ({"a": (5,), "b": (5,)},
            lambda s: ad.dot(s["a"], s["b"])),
    "sigmoid": ({"x": (6,)},
                lambda s: ad.tsum(ad.sigmoid(s["x"]))),
    "tanh": ({"x": (6,)},
             lambda s: ad.tsum(ad.tanh(s["x"]))),
    "exp": ({"x": (6,)},
            lambda s: ad.tsum(ad.exp(s["x"]))),
    "log": ({"x": (6,)},
            lambda s: ad.tsum(ad.log(ad.add(ad.mul(s["x"], s["x"]), 0.5)))),
    "leaky_relu": ({"x": (6,)},
                   lambda s: ad.tsum(ad.leaky_relu(ad.add(s["x"], 0.3)))),
    "layer_norm": ({"x": (6,), "g": (6,), "b": (6,)},
                   lambda s: ad.tsum(ad.layer_norm(s["x"], s["g"], s["b"]))),
    "softmax": ({"x": (5,), "w": (5,)},
                lambda s: ad.dot(ad.softmax(s["x"]), s["w"])),
    "concat": ({"a": (3,), "b": (2,)},
               lambda s: ad.tsum(ad.mul(ad.concat([s["a"], s["b"]]),
                                        ad.concat([s["b"], s["a"]]))),),
    "pick_row": ({"m": (4, 3)},
                 lambda s: ad.tsum(ad.pick_row(s["m"], 2))),
    "tmean": ({"x": (7,)},
              lambda s: ad.tmean(ad.mul(s["x"], s["x"]))),
    "stack_mean": ({"a": (3,), "b": (3,), "c": (3,)},
                   lambda s: ad.tsum(ad.stack_mean([s["a"], s["b"], s["c"]]))),
    "square": ({"x": (6,)},
               lambda s: ad.tsum(ad.square(s["x"]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    shapes, f = PRIMITIVE_CASES[name]
    for seed in range(5):
        store = make_store(seed, shapes)
        report = grad_check(f, store, rng=np.random.default_rng(seed))
        assert report.ok(1e-4), f"{name} seed {seed}: {report.max_rel_err:.2e}"


def test_gru_cell_gradient():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        p = init_gru(store, "g", 3, 4, rng)
        x = store.create("x", rng.normal(size=3))
        h0 = store.create("h0", rng.normal(size=4))

        def f(s):
            return ad.tsum(gru_cell(s["x"], s["h0"], p))

        report = grad_check(f, store, rng=rng)
        assert report.ok(1e-4), f"seed {seed}: {report.max_rel_err:.2e}"


def test_backward_accumulates_through_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.tsum(ad.add(ad.mul(x, x), x))  # d/dx = 2x + 1
    y.backward()
    np.testing.assert_allclose(x.grad, [3.0, 5.0], rtol=0, atol=1e-15)


def test_nonfinite_detection():
    x = Tensor(np.array([2000.0]), requires_grad=True)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(ad.NonFiniteError):
            ad.exp(x)
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor(np.array([-1.0])))


def test_grad_check_rejects_non_scalar():
    store = make_store(0, {"x": (3,)})
    with pytest.raises(TypeError):
        grad_check(lambda s: ad.mul(s["x"], 2.0), store)


def test_rmsprop_single_step_arithmetic():
    store = ParameterStore()
    p = store.create("p", np.array([1.0, -2.0]))
    opt = RMSProp(store, lr=0.01, rho=0.9, eps=1e-8)
    g = np.array([0.5, -0.25])
    p.grad[:] = g
    opt.step()
    cache = 0.1 * g ** 2
    want = np.array([1.0, -2.0]) - 0.01 * g / (np.sqrt(cache) + 1e-8)
    np.testing.assert_allclose(p.data, want, rtol=1e-15)


def test_pack_load_flat_round_trip():
    store = make_store(7, {"a": (3, 2), "b": (4,)})
    flat = store.pack()
    assert flat.size == store.n_params()
    store2 = store.copy()
    store2["a"].data[:] = 0.0
    store2.load_flat(flat)
    np.testing.assert_array_equal(store2["a"].data, store["a"].data)
    np.testing.assert_array_equal(store2["b"].data, store["b"].data)
    with pytest.raises(ValueError):
        store.load_flat(flat[:-1])


def test_store_save_load(tmp_path):
    store = make_store(8, {"w": (2, 2), "b": (2,)})
    path = tmp_path / "params.npz"
    store.save(path)
    loaded = ParameterStore.load(path)
    assert loaded.names() == store.names()
    np.testing.assert_array_equal(loaded["w"].data, store["w"].data)


def test_gru_params_shapes():
    rng = np.random.default_rng(0)
    store = ParameterStore()
    p = init_gru(store, "enc.f", 6, 16, rng)
    assert isinstance(p, GruParams)
    assert store["enc.f.w_z"].shape == (16, 6)
    assert store["enc.f.u_z"].shape == (16, 16)
    assert store["enc.f.b_z"].shape == (16,)
