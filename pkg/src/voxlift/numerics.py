"""Dense tensors with a small reverse-mode autodiff engine.

Only the operations the lifting pipeline needs are provided. Every op is
vectorized over numpy arrays; the graph is recorded eagerly and replayed in
reverse creation order by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_ids = itertools.count()
_id_lock = threading.Lock()
_state = threading.local()


def _next_id() -> int:
    with _id_lock:
        return next(_ids)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class GraphConsumedError(RuntimeError):
    """Raised when backward is replayed on a graph that was already consumed."""


class NonDifferentiablePoint(ValueError):
    """Raised by the gradient checker when a coordinate sits on a kink."""

    def __init__(self, index, left, right):
        super().__init__(f"one-sided slopes disagree at coordinate {index}: {left} vs {right}")
        self.index = index


class Tensor:
    """A dense array that optionally records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._id = _next_id()
        self._consumed = False
        self.name = name

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


check_finite = True


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("operation produced non-finite values")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes only where the input is inside."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# -- reductions and shape ops ------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), bw)


def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2D tensor; the result has shape idx.shape + (cols,)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    flat = idx.reshape(-1)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, flat, g.reshape(flat.size, *a.shape[1:]))
        return (ga,)

    return _make(a.data[flat].reshape(idx.shape + a.shape[1:]), (a,), bw)


def index_add(base, idx: np.ndarray, values) -> Tensor:
    """Return a copy of ``base`` with ``values`` added at rows ``idx`` (unique).

    Rows not listed are copied bit-exactly from ``base``.
    """
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(idx)
    out = base.data.copy()
    out[idx] += values.data
    return _make(out, (base, values), lambda g: (g, g[idx]))


def scatter_rows(values, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of ``values`` at unique positions ``idx`` of a zero array."""
    values = as_tensor(values)
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    out[idx] = values.data
    return _make(out, (values,), lambda g: (g[idx],))


# -- composite ops the pipeline is built on -----------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n) and 2D ``b`` of shape (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, b.shape[1])
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """y = W x + b applied over the last axis of ``x``; ``weight`` is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: weight {weight.shape}, input {x.shape}")
    y = matmul(x, transpose(weight))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        y = y + bias
    return y


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def scaled_dot_attention(q, keys, values, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q K^T / sqrt(C)) V, batched over leading axes.

    ``q`` is (..., C); ``keys`` and ``values`` are (..., N, C). ``mask`` (..., N)
    marks usable rows; masked rows receive exactly zero weight. Every batch row
    must have at least one usable key.
    """
    q, keys, values = as_tensor(q), as_tensor(keys), as_tensor(values)
    if keys.ndim < 2 or keys.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    c = q.shape[-1]
    logits = tsum(mul(reshape(q, q.shape[:-1] + (1, c)), keys), axis=-1) * (1.0 / math.sqrt(c))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("attention row without any valid key")
        logits = logits + np.where(mask, 0.0, -1e30)
    w = softmax(logits, axis=-1)
    return tsum(mul(reshape(w, w.shape + (1,)), values), axis=-2)


def corner_weights(coords, extents: Sequence[int]):
    """Corner indices and blend weights for clamped trilinear interpolation.

    ``coords`` is (..., 3) in grid-index units, ordered like ``extents``.
    Returns ``(index, weights)`` where ``index`` is an int array (..., 8, 3)
    and ``weights`` a Tensor (..., 8). Corners are ordered with the last axis
    varying fastest.
    """
    coords = as_tensor(coords)
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("non-finite sampling coordinate")
    lows, fracs = [], []
    for ax, n in enumerate(extents):
        c = clip(coords[..., ax], 0.0, float(n - 1))
        i0 = np.clip(np.floor(c.data), 0, max(n - 2, 0)).astype(np.int64)
        lows.append(i0)
        fracs.append(c - i0.astype(c.dtype))
    corner_idx = []
    for bits in itertools.product((0, 1), repeat=3):
        corner_idx.append(np.stack(
            [np.minimum(lows[ax] + bits[ax], extents[ax] - 1) for ax in range(3)], axis=-1))
    index = np.stack(corner_idx, axis=-2)
    one = [1.0 - f for f in fracs]
    per_axis = [stack([one[ax], fracs[ax]], axis=-1) for ax in range(3)]
    lead = coords.shape[:-1]
    wx = reshape(per_axis[0], lead + (2, 1, 1))
    wy = reshape(per_axis[1], lead + (1, 2, 1))
    wz = reshape(per_axis[2], lead + (1, 1, 2))
    weights = reshape(wx * wy * wz, lead + (8,))
    return index, weights


def trilinear_sample(field, coords) -> Tensor:
    """Sample an explicit (H, W, D, C) grid at continuous (u, v, d) points.

    ``u`` indexes the W axis, ``v`` the H axis and ``d`` the D axis, matching
    image conventions. Coordinates are clamped per axis before blending.
    ``coords`` may be (3,) or (..., 3); the result is (C,) or (..., C).
    """
    field, coords = as_tensor(field), as_tensor(coords)
    h, w, d, c = field.shape
    single = coords.ndim == 1
    if single:
        coords = reshape(coords, (1, 3))
    index, weights = corner_weights(coords, (w, h, d))
    lin = (index[..., 1] * w + index[..., 0]) * d + index[..., 2]
    corners = take_rows(reshape(field, (h * w * d, c)), lin)
    out = tsum(mul(reshape(weights, weights.shape + (1,)), corners), axis=-2)
    return reshape(out, (c,)) if single else out


# -- backward -----------------------------------------------------------------------

def backward(loss: Tensor, store: "ParameterStore | None" = None) -> None:
    """Reverse-mode pass from a scalar ``loss``.

    Leaf tensors that require grad accumulate into ``.grad``. When ``store`` is
    given its gradient map is reset and filled for every parameter, with zeros
    for parameters that are off the path.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t._id in nodes or not t.requires_grad:
            continue
        if t._consumed:
            raise GraphConsumedError("backward already ran on this graph; run a new forward")
        nodes[t._id] = t
        stack_.extend(t._parents)
    grads = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if not t._parents:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t._backward(g)
        t._backward = None
        t._consumed = True
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
        t._parents = ()
    loss._consumed = True

    if store is not None:
        store.collect_grads()


# -- parameters -------------------------------------------------------------------

def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class ParameterStore:
    """Named learnable tensors with deterministic, name-keyed initialization."""

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.seed = int(seed)
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(sorted(self.params))

    def names(self) -> list[str]:
        return sorted(self.params)

    def uniform_init(self, name: str, shape: tuple, fan_in: int | None = None) -> np.ndarray:
        if fan_in is None:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        rng = np.random.default_rng([self.seed, _name_key(name)])
        return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def get(self, name: str, shape: tuple, init: str | np.ndarray = "uniform", fan_in: int | None = None) -> Tensor:
        """Fetch a parameter, creating it on first use."""
        shape = tuple(int(s) for s in shape)
        if name in self.params:
            p = self.params[name]
            if p.shape != shape:
                raise ValueError(f"parameter {name!r} has shape {p.shape}, requested {shape}")
            return p
        if isinstance(init, np.ndarray):
            value = init.astype(self.dtype).reshape(shape)
        elif init == "zeros":
            value = np.zeros(shape, dtype=self.dtype)
        elif init == "uniform":
            value = self.uniform_init(name, shape, fan_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(value, requires_grad=True, name=name)
        self.params[name] = p
        self.grads[name] = np.zeros(shape, dtype=self.dtype)
        return p

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=self.dtype)
        if name in self.params:
            if self.params[name].shape != value.shape:
                raise ValueError(f"parameter {name!r} has shape {self.params[name].shape}")
            self.params[name].data = value.copy()
        else:
            self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)
            self.grads[name] = np.zeros(value.shape, dtype=self.dtype)

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            p.grad = None
            self.grads[name] = np.zeros(p.shape, dtype=self.dtype)

    def collect_grads(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros(p.shape, dtype=self.dtype) if p.grad is None else p.grad
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: self.params[name].data.copy() for name in self.names()}

    def load_state_dict(self, state: dict) -> None:
        for name, value in state.items():
            self.set(name, value)

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.seed, dtype=dtype)
        for name in self.names():
            out.set(name, self.params[name].data.astype(dtype))
        return out

    def save(self, path) -> None:
        np.savez(path, **self.state_dict())

    @classmethod
    def load(cls, path, seed: int = 0) -> "ParameterStore":
        store = cls(seed)
        with np.load(path) as data:
            for name in sorted(data.files):
                store.set(name, data[name])
        return store


# -- finite differences -----------------------------------------------------------

def finite_diff_gradcheck(op: Callable[..., Tensor], inputs: Iterable, eps: float = 1e-5,
                          seed: int = 0, kink_tol: float | None = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps Tensors to a Tensor; non-scalar outputs are reduced with a
    fixed random projection. Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``kink_tol`` set, a
    coordinate whose one-sided slopes disagree raises NonDifferentiablePoint
    so the caller can resample.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    proj = {}

    def scalar(vals) -> Tensor:
        out = op(*vals)
        if out.size == 1:
            return reshape(out, ())
        if out.shape not in proj:
            proj[out.shape] = np.random.default_rng(seed).standard_normal(out.shape)
        return tsum(mul(out, proj[out.shape]))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = scalar(leaves)
    backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def f(vals) -> float:
        with no_grad():
            return float(scalar([Tensor(v) for v in vals]).data)

    f0 = f(arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(arrays)
            flat[j] = orig - eps
            fm = f(arrays)
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            if kink_tol is not None:
                right, left = (fp - f0) / eps, (f0 - fm) / eps
                if abs(right - left) > kink_tol * max(1.0, abs(numeric)) + 1e-4:
                    raise NonDifferentiablePoint((k, j), left, right)
            err = abs(analytic[k].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
