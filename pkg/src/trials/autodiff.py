"""Minimal reverse-mode autodiff core on numpy.

Dense double-precision tensors, a dynamically recorded tape, the handful of
primitives the encoders need (matmul, GRU cell, layer norm, softmax, ...),
a named parameter store with paired gradient accumulators, RMSProp, and a
finite-difference gradient checker.

Every primitive checks its output for NaN/Inf and raises NonFiniteError on
violation; no primitive mutates its inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(ArithmeticError):
    """A primitive produced a NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite output of {op}")
    return a


class Tensor:
    """A node in the computation tape.

    ``data`` is a row-major float64 ndarray.  Leaf tensors created with
    ``requires_grad=True`` accumulate into ``grad`` on ``backward()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 name: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse sweep from this tensor; accumulates into leaf ``grad``s."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {}
        grads[id(self)] = np.ones_like(self.data) if seed is None else _as_array(seed)
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitives ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = _check_finite(a.data + b.data, "add")

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = _check_finite(a.data - b.data, "sub")

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = _check_finite(a.data * b.data, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> Tensor:
    """Matrix-vector or matrix-matrix product."""
    a, b = _wrap(a), _wrap(b)
    try:
        out_data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    _check_finite(out_data, "matmul")

    def bw(g):
        if b.data.ndim == 1 and a.data.ndim == 2:
            return (np.outer(g, b.data), a.data.T @ g)
        if a.data.ndim == 1 and b.data.ndim == 2:
            return (g @ b.data.T, np.outer(a.data, g))
        if a.data.ndim == 1 and b.data.ndim == 1:
            return (g * b.data, g * a.data)
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def dot(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} {b.shape}")
    out_data = _check_finite(np.dot(a.data, b.data), "dot")

    def bw(g):
        return (g * b.data, g * a.data)

    return Tensor(out_data, _parents=(a, b), _backward=bw)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out_data = _check_finite(1.0 / (1.0 + np.exp(-x.data)), "sigmoid")

    def bw(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def tanh(x) -> Tensor:
    x = _wrap(x)
    out_data = _check_finite(np.tanh(x.data), "tanh")

    def bw(g):
        return (g * (1.0 - out_data * out_data),)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def exp(x) -> Tensor:
    x = _wrap(x)
    out_data = _check_finite(np.exp(x.data), "exp")

    def bw(g):
        return (g * out_data,)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def log(x) -> Tensor:
    x = _wrap(x)
    out_data = _check_finite(np.log(x.data), "log")

    def bw(g):
        return (g / x.data,)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _wrap(x)
    out_data = _check_finite(np.where(x.data >= 0.0, x.data, slope * x.data),
                             "leaky_relu")

    def bw(g):
        return (g * np.where(x.data >= 0.0, 1.0, slope),)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the feature axis (population variance), then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs feature dim >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = _check_finite(xhat * gain.data + bias.data, "layer_norm")

    def bw(g):
        gx = g * gain.data
        # d xhat / d x backward: inv * (gx - mean(gx) - xhat * mean(gx * xhat))
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        return (dx, dgain, dbias)

    return Tensor(out_data, _parents=(x, gain, bias), _backward=bw)


def softmax(x) -> Tensor:
    """Exp-normalize a vector with max-subtraction for stability."""
    x = _wrap(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("non-finite input to softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        s = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - s),)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def concat(parts: list) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out_data = _check_finite(np.concatenate([p.data for p in parts]), "concat")
    sizes = [p.data.shape[0] for p in parts]

    def bw(g):
        out, off = [], 0
        for s in sizes:
            out.append(g[off:off + s])
            off += s
        return tuple(out)

    return Tensor(out_data, _parents=tuple(parts), _backward=bw)


def pick_row(matrix, index: int) -> Tensor:
    """Embedding lookup: one row of a matrix."""
    matrix = _wrap(matrix)
    out_data = matrix.data[index].copy()

    def bw(g):
        gm = np.zeros_like(matrix.data)
        gm[index] = g
        return (gm,)

    return Tensor(out_data, _parents=(matrix,), _backward=bw)


def tsum(x) -> Tensor:
    x = _wrap(x)
    out_data = _check_finite(x.data.sum(), "sum")

    def bw(g):
        return (np.full_like(x.data, float(g)),)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def tmean(x) -> Tensor:
    x = _wrap(x)
    n = x.data.size
    out_data = _check_finite(x.data.mean(), "mean")

    def bw(g):
        return (np.full_like(x.data, float(g) / n),)

    return Tensor(out_data, _parents=(x,), _backward=bw)


def stack_mean(parts: list) -> Tensor:
    """Elementwise mean of equally shaped vectors."""
    parts = [_wrap(p) for p in parts]
    n = len(parts)
    out_data = _check_finite(sum(p.data for p in parts) / n, "stack_mean")

    def bw(g):
        return tuple(g / n for _ in parts)

    return Tensor(out_data, _parents=tuple(parts), _backward=bw)


def square(x) -> Tensor:
    return mul(x, x)


# -- GRU ------------------------------------------------------------------

@dataclass
class GruParams:
    """One GRU direction: gate weights for update z, reset r, candidate h~."""
    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor
    d_in: int
    d: int

    def tensors(self) -> dict[str, Tensor]:
        return {"w_z": self.w_z, "u_z": self.u_z, "b_z": self.b_z,
                "w_r": self.w_r, "u_r": self.u_r, "b_r": self.b_r,
                "w_h": self.w_h, "u_h": self.u_h, "b_h": self.b_h}


def gru_cell(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """Standard GRU recurrence; candidate uses r ⊙ h_prev inside U_h."""
    if x.data.shape != (p.d_in,) or h_prev.data.shape != (p.d,):
        raise ShapeError(
            f"gru_cell got x{x.shape}, h{h_prev.shape}; expected ({p.d_in},), ({p.d},)")
    z = sigmoid(add(add(matmul(p.w_z, x), matmul(p.u_z, h_prev)), p.b_z))
    r = sigmoid(add(add(matmul(p.w_r, x), matmul(p.u_r, h_prev)), p.b_r))
    hc = tanh(add(add(matmul(p.w_h, x), matmul(p.u_h, mul(r, h_prev))), p.b_h))
    return add(mul(sub(Tensor(np.ones(p.d)), z), h_prev), mul(z, hc))


# -- parameter store ------------------------------------------------------

@dataclass
class ParameterStore:
    """Named trainable tensors with paired gradient accumulators."""
    entries: dict[str, Tensor] = field(default_factory=dict)

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        t.zero_grad()
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.data.size for t in self.entries.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self.entries.items():
            out.create(name, t.data.copy())
        return out

    # flat packing (layout shared with the .psnap format and the fast path)
    def layout(self) -> dict[str, tuple[int, tuple]]:
        out, off = {}, 0
        for name, t in self.entries.items():
            out[name] = (off, t.data.shape)
            off += t.data.size
        return out

    def pack(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.entries.values()]) \
            if self.entries else np.zeros(0)

    def pack_grad(self) -> np.ndarray:
        return np.concatenate([t.grad.ravel() for t in self.entries.values()]) \
            if self.entries else np.zeros(0)

    def load_flat(self, flat: np.ndarray) -> None:
        off = 0
        for t in self.entries.values():
            n = t.data.size
            t.data[...] = flat[off:off + n].reshape(t.data.shape)
            off += n
        if off != flat.size:
            raise ShapeError("flat vector size does not match store")

    def save(self, path) -> None:
        """Write the .psnap format: one JSON header line, then little-endian doubles."""
        header = {name: [off, list(shape)] for name, (off, shape) in self.layout().items()}
        blob = self.pack()
        with open(path, "wb") as f:
            f.write(json.dumps(header).encode("utf-8"))
            f.write(b"\n")
            f.write(blob.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as f:
            header_line = f.readline()
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: not a .psnap file") from exc
            blob = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
        store = cls()
        for name, (off, shape) in header.items():
            n = int(np.prod(shape)) if shape else 1
            store.create(name, blob[off:off + n].reshape(shape))
        return store


def init_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_gru(store: ParameterStore, prefix: str, d_in: int, d: int,
             rng: np.random.Generator) -> GruParams:
    def w(tag):
        return store.create(f"{prefix}.{tag}", init_matrix(rng, d, d_in))

    def u(tag):
        return store.create(f"{prefix}.{tag}", init_matrix(rng, d, d))

    def b(tag):
        return store.create(f"{prefix}.{tag}", np.zeros(d))

    return GruParams(w_z=w("w_z"), u_z=u("u_z"), b_z=b("b_z"),
                     w_r=w("w_r"), u_r=u("u_r"), b_r=b("b_r"),
                     w_h=w("w_h"), u_h=u("u_h"), b_h=b("b_h"),
                     d_in=d_in, d=d)


# -- optimizer ------------------------------------------------------------

class RMSProp:
    """RMSProp over a ParameterStore (per-coordinate moving mean square)."""

    def __init__(self, store: ParameterStore, lr: float, rho: float = 0.99,
                 eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.cache = {name: np.zeros_like(t.data) for name, t in store.entries.items()}

    def step(self) -> None:
        if self.lr == 0.0:
            return
        for name, t in self.store.entries.items():
            c = self.cache[name]
            g = t.grad
            c *= self.rho
            c += (1.0 - self.rho) * g * g
            t.data -= self.lr * g / (np.sqrt(c) + self.eps)

    def zero_grad(self) -> None:
        self.store.zero_grad()


# -- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, float]

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def grad_check(f, store: ParameterStore, step: float = 1e-5,
               max_coords: int = 32, rng: np.random.Generator | None = None
               ) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(store)`` to central differences.

    Samples up to ``max_coords`` coordinates per tensor (all coordinates when a
    tensor is small).  Relative error per coordinate is
    |a - b| / max(|a|, |b|, 1e-8).
    """
    rng = rng or np.random.default_rng(0)
    store.zero_grad()
    out = f(store)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise TypeError("grad_check expects f to return a scalar Tensor")
    out.backward()
    analytic = {name: t.grad.copy() for name, t in store.entries.items()}

    report: dict[str, float] = {}
    for name, t in store.entries.items():
        flat = t.data.ravel()
        n = flat.size
        idx = np.arange(n) if n <= max_coords else \
            rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            fp = f(store).item()
            flat[k] = orig - step
            fm = f(store).item()
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f non-finite while probing {name}[{k}]")
            fd = (fp - fm) / (2.0 * step)
            a = analytic[name].ravel()[k]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
        report[name] = worst
    return GradCheckReport(per_param=report)
