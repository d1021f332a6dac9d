"""A small reverse-mode autodiff engine over numpy arrays.

Each op builds an output :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
``Tensor.backward`` walks the recorded graph in reverse topological order.
Only the handful of operations the detector needs are provided.
"""

from __future__ import annotations

import contextlib
import math
import struct
from collections.abc import Callable, Iterable

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class TrainingError(FloatingPointError):
    """Non-finite gradient or loss; ``name`` identifies the culprit."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class CheckpointError(ValueError):
    pass


# names of ops whose backward should be deliberately perturbed (gradcheck self-test)
_FAULTY_OPS: set[str] = set()


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.1):
    """Scale the backward of ``op`` by ``factor`` while the context is active."""
    _FAULTY_OPS.add(op)
    global _FAULT_FACTOR
    old, _FAULT_FACTOR = _FAULT_FACTOR, factor
    try:
        yield
    finally:
        _FAULTY_OPS.discard(op)
        _FAULT_FACTOR = old


_FAULT_FACTOR = 1.0


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Record no backward closures inside the block (inference)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class FrozenDetach:
    """Record every :func:`detached` value on the first call of a function and replay them afterwards.

    Finite differences of a loss with stop-gradient points must hold those
    values fixed; wrapping the loss in ``FrozenDetach()(loss_fn)`` does that.
    """

    active: FrozenDetach | None = None

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recorded = False
        self.pos = 0

    def __call__(self, fn):
        def wrapped():
            prev, FrozenDetach.active = FrozenDetach.active, self
            self.pos = 0
            try:
                return fn()
            finally:
                FrozenDetach.active = prev
                self.recorded = True
        return wrapped

    def take(self, arr):
        if not self.recorded:
            self.values.append(np.array(arr, copy=True))
            return arr
        v = self.values[self.pos]
        self.pos += 1
        return v.copy()


def detached(arr: np.ndarray) -> np.ndarray:
    """Mark a stop-gradient value (a plain array cut from the graph)."""
    fr = FrozenDetach.active
    return arr if fr is None else fr.take(arr)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype) if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            if node.op in _FAULTY_OPS:
                grads = tuple(None if g is None else g * _FAULT_FACTOR for g in grads)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g
            if node._parents:
                node.grad = None  # interior node: free memory

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


LEAKY_SLOPE = 0.01


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    xd = x.data
    s = xd.dtype.type(slope)
    # arithmetic masks are much faster than np.where on random sign patterns
    factor = (xd > 0) * (1 - s) + s
    out = xd * factor

    def back(g):
        return (g * factor,)

    return Tensor._make(out, (x,), back, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sin(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def cos(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    out = np.sqrt(x.data + eps)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber (smooth-L1 scaled by ``delta``)."""
    xd = x.data
    ax = np.abs(xd)
    quad = ax <= delta
    out = np.where(quad, 0.5 * xd * xd, delta * (ax - 0.5 * delta))
    return Tensor._make(
        out, (x,), lambda g: (np.where(quad, g * xd, g * delta * np.sign(xd)),), "huber"
    )


def norm(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis`` (smoothed by ``eps`` under the root)."""
    return sqrt(tsum(square(x), axis=axis), eps=eps)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._make(out, (x,), back, "max")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, back, "concat")


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing. Use :func:`gather_rows` for index arrays."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return Tensor._make(x.data[key], (x,), back, "index")


def scatter_rows(g: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``g`` (len(idx), d) into an (n_rows, d) array at ``idx``."""
    m = idx.size
    S = sp.csr_matrix(
        (np.ones(m, dtype=g.dtype), (idx.ravel(), np.arange(m))), shape=(n_rows, m)
    )
    return np.asarray(S @ g)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[idx]`` for a 2-D ``x`` and an integer array ``idx`` of any shape."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n, d = x.shape

    def back(g):
        return (scatter_rows(g.reshape(-1, d), idx, n),)

    return Tensor._make(x.data[idx], (x,), back, "gather")


def batch_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch gather: ``x`` (B, N, d), ``idx`` (B, ...) -> (B, ..., d)."""
    B, N, d = x.shape
    idx = np.asarray(idx, dtype=np.int64)
    offs = (np.arange(B) * N).reshape((B,) + (1,) * (idx.ndim - 1))
    return gather_rows(reshape(x, (B * N, d)), idx + offs)


# ---------------------------------------------------------------------------
# dense algebra and fused losses
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != layer input {weight.shape[1]}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    # a 2-D product is one GEMM; N-D matmul would loop over the leading axes
    out = (xd.reshape(-1, xd.shape[-1]) @ wd.T).reshape(lead + (wd.shape[0],))
    if bias is not None:
        out += bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(lead + (wd.shape[1],))
        gw = g2.T @ xd.reshape(-1, wd.shape[1])
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, back, "linear")


def linear_leaky(x: Tensor, weight: Tensor, bias: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """``leaky_relu(linear(x, weight, bias))`` as one op, which saves a full pass over the activations."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != layer input {weight.shape[1]}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    out = xd.reshape(-1, xd.shape[-1]) @ wd.T
    out += bias.data
    s = out.dtype.type(slope)
    # one float factor serves both passes; boolean-masked writes are slow on random sign patterns
    factor = (out > 0) * (1 - s) + s
    out *= factor

    def back(g):
        g2 = g.reshape(-1, g.shape[-1]) * factor
        gx = (g2 @ wd).reshape(lead + (wd.shape[1],))
        gw = g2.T @ xd.reshape(-1, wd.shape[1])
        return gx, gw, g2.sum(axis=0)

    return Tensor._make(out.reshape(lead + (wd.shape[0],)), (x, weight, bias), back, "linear")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"cannot multiply {ad.shape} by {bd.shape}")
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Weighted sum of softmax cross-entropies; ``logits`` (..., C), ``target`` (...)."""
    z = logits.data
    C = z.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    w = np.ones(target.shape, dtype=z.dtype) if weight is None else np.asarray(weight, dtype=z.dtype)
    lsm = _log_softmax(z)
    nll = -np.take_along_axis(lsm, target[..., None], axis=-1)[..., 0]
    out = np.asarray(np.sum(w * nll), dtype=z.dtype)

    def back(g):
        p = np.exp(lsm)
        p[..., :] -= np.eye(C, dtype=z.dtype)[target]
        return (g * w[..., None] * p,)

    return Tensor._make(out, (logits,), back, "cross_entropy")


def bce_with_logits(logits: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Weighted sum of binary cross-entropies on raw logits."""
    z = logits.data
    y = np.asarray(target, dtype=z.dtype)
    w = np.ones_like(z) if weight is None else np.asarray(weight, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(np.sum(w * loss), dtype=z.dtype)

    def back(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * w * (p - y),)

    return Tensor._make(out, (logits,), back, "bce")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Parameter container; parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise CheckpointError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}"
                )
            p.data = arr.astype(p.dtype).copy()


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor] | None] = {
    "none": None,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
}


class Dense(Module):
    """Fully connected layer ``act(W x + b)`` with Kaiming-uniform init."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "none", rng=None, dtype=np.float64, zero: bool = False):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        gain = 6.0 if activation == "leaky_relu" else 3.0
        bound = math.sqrt(gain / in_dim)
        w = np.zeros((out_dim, in_dim)) if zero else rng.uniform(-bound, bound, size=(out_dim, in_dim))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        self.activation = activation
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if self.activation == "leaky_relu":
            return linear_leaky(x, self.weight, self.bias)
        y = linear(x, self.weight, self.bias)
        act = ACTIVATIONS[self.activation]
        return y if act is None else act(y)


class MLP(Module):
    """Stack of Dense layers; ``widths`` excludes the input width."""

    def __init__(self, in_dim: int, widths, rng=None, dtype=np.float64, last_activation: str = "leaky_relu"):
        self.layers = []
        d = in_dim
        for i, w in enumerate(widths):
            act = "leaky_relu" if i < len(widths) - 1 else last_activation
            self.layers.append(Dense(d, w, act, rng=rng, dtype=dtype))
            d = w
        self.out_dim = d

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def masked(x: Tensor, mask: np.ndarray | None, fill: float = -1e9) -> Tensor:
    """Replace entries whose group slot is invalid (mask False) by ``fill`` before a max."""
    if mask is None:
        return x
    m = mask[..., None].astype(x.dtype)
    return add(mul(x, m), (1.0 - m) * fill)


class TrainableAggregation(Module):
    """Shared dense layer per element, max-pool over the group, then a dense layer."""

    def __init__(self, in_dim: int, out_dim: int, rng=None, dtype=np.float64):
        self.pre = Dense(in_dim, out_dim, "leaky_relu", rng=rng, dtype=dtype)
        self.post = Dense(out_dim, out_dim, "leaky_relu", rng=rng, dtype=dtype)
        self.out_dim = out_dim

    def __call__(self, x: Tensor, axis: int = -2, mask: np.ndarray | None = None) -> Tensor:
        return self.post(_pool_max(self.pre(x), axis, mask))


def _pool_max(x: Tensor, axis: int, mask):
    pooled = tmax(masked(x, mask), axis=axis)
    if mask is not None:
        # groups with no valid member pool to zero
        any_valid = mask.any(axis=-1)[..., None].astype(x.dtype)
        pooled = mul(pooled, any_valid)
    return pooled


def aggregate(x: Tensor, mode: str = "max", module: TrainableAggregation | None = None, axis: int = -2, mask=None) -> Tensor:
    """Reduce a group axis: ``mode`` in {"max", "mean", "trainable"}."""
    if x.shape[axis] < 1:
        raise ShapeError("cannot aggregate an empty group")
    if mode == "max":
        return _pool_max(x, axis, mask)
    if mode == "mean":
        if mask is None:
            return mean(x, axis=axis)
        m = mask[..., None].astype(x.dtype)
        cnt = np.maximum(m.sum(axis=axis), 1.0)
        return div(tsum(mul(x, m), axis=axis), cnt)
    if mode == "trainable":
        if module is None:
            raise ValueError("trainable aggregation needs its module")
        return module(x, axis=axis, mask=mask)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Raw interleaved (sin, cos) embedding of scalar time values.

    Pair ``i`` uses frequency ``max_period ** (-i / (dim / 2))``; pair 0 has
    frequency 1, so t = 0 maps it to (0, 1).
    """
    if dim % 2:
        raise ShapeError("embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = max_period ** (-np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class TimeEmbedding(Module):
    """Sinusoidal embedding of a noise-level index followed by two LeakyReLU layers."""

    def __init__(self, dim: int, num_levels: int, rng=None, dtype=np.float64):
        if dim % 2:
            raise ShapeError("time embedding dimension must be even")
        self.dim = dim
        self.num_levels = num_levels
        self.fc1 = Dense(dim, dim, "leaky_relu", rng=rng, dtype=dtype)
        self.fc2 = Dense(dim, dim, "leaky_relu", rng=rng, dtype=dtype)

    def raw(self, t_index) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t_index))
        if np.any(t < 1) or np.any(t > self.num_levels):
            raise IndexError(f"time index {t_index} outside [1, {self.num_levels}]")
        return sinusoidal_embedding(t, self.dim)

    def __call__(self, t_index) -> Tensor:
        raw = Tensor(self.raw(t_index).astype(self.fc1.weight.dtype))
        return self.fc2(self.fc1(raw))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def clip_gradients(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


class Adam:
    """Adam with global gradient-norm clipping and optional decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float = 1.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.last_grad_norm = 0.0

    def step(self, grads: dict[str, np.ndarray] | None = None):
        if grads is None:
            grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {k}", name=k)
        grads, self.last_grad_norm = clip_gradients(grads, self.clip_norm)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array(float(self.step_count)), "adam.lr": np.array(self.lr)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.step_count = int(state["adam.step"])
        self.lr = float(state["adam.lr"])
        for k, p in self.params.items():
            self.m[k] = np.asarray(state[f"adam.m.{k}"], dtype=p.dtype).copy()
            self.v[k] = np.asarray(state[f"adam.v.{k}"], dtype=p.dtype).copy()


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
              max_checks: int | None = 12, rng=None, stencil: int = 3) -> dict[str, float]:
    """Compare analytic gradients with central differences.

    ``loss_fn`` must be deterministic. At most ``max_checks`` entries of each
    parameter are probed (all of them when ``None``). ``stencil`` is 3 for the
    plain two-sided difference or 5 for the fourth-order one, which tolerates a
    larger ``h`` and so loses less to roundoff on large losses. Returns the
    worst relative error per parameter name.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    def at(flat, i, x):
        flat[i] = x
        return float(loss_fn().data)

    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        probe = np.arange(n) if max_checks is None or n <= max_checks else rng.choice(n, max_checks, replace=False)
        worst = 0.0
        for i in probe:
            orig = flat[i]
            d1 = at(flat, i, orig + h) - at(flat, i, orig - h)
            if stencil == 5:
                d2 = at(flat, i, orig + 2 * h) - at(flat, i, orig - 2 * h)
                num = (8 * d1 - d2) / (12 * h)
            else:
                num = d1 / (2 * h)
            flat[i] = orig
            err = float(relative_error(np.array(analytic[name].reshape(-1)[i]), np.array(num)))
            worst = max(worst, err)
        report[name] = worst
    for p in params.values():
        p.grad = None
    return report


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------
# layout (little endian):
#   8 bytes  magic b"VSTPCKPT"
#   uint32   format version (1)
#   uint32   entry count
#   per entry: uint16 name length, utf-8 name, uint8 ndim, ndim x uint64 dims,
#              prod(dims) x float64 values (C order)

CHECKPOINT_MAGIC = b"VSTPCKPT"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, tensors: dict[str, np.ndarray]):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out
