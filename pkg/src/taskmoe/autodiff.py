"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when gradients are tracked,
records the closure that propagates its gradient to its parents.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order.

NaN and +inf are rejected at op boundaries.  -inf is allowed because it
marks masked logits (disabled experts); :func:`softmax` maps it to an exact 0
and routes zero gradient to it.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

# tanh-approximation constants for GELU
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or +inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _check(arr, op):
    if not np.isfinite(arr).all():
        if np.isnan(arr).any() or np.isposinf(arr).any():
            raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # ------------------------------------------------------------------ info
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # --------------------------------------------------------------- backward
    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------- operators
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward, op):
    _check(data, op)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, None, parents, backward)
    return Tensor(data)


# ---------------------------------------------------------------- elementwise
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def power(a, p):
    out = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(out, (a,), bw, "power")


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), bw, "exp")


def log(a):
    def bw(g):
        _accum(a, g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), bw, "log")


def tanh(a):
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def gelu(a):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out, (a,), bw, "gelu")


# ----------------------------------------------------------------- reductions
def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# -------------------------------------------------------------------- shaping
def reshape(a, shape):
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(out, (a,), bw, "transpose")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis
               for k in parts)


def index(a, idx):
    out = a.data[idx]
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _make(np.array(out, dtype=DTYPE), (a,), bw, "index")


def take_rows(a, rows):
    """Gather along axis 0."""
    rows = np.asarray(rows)
    out = a.data[rows]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        _accum(a, full)

    return _make(out, (a,), bw, "take_rows")


def scatter_rows(a, rows, n):
    """Place ``a`` at ``rows`` of a zero tensor with ``n`` rows (inverse of take_rows)."""
    rows = np.asarray(rows)
    out = np.zeros((n,) + a.shape[1:], dtype=DTYPE)
    out[rows] = a.data

    def bw(g):
        _accum(a, g[rows])

    return _make(out, (a,), bw, "scatter_rows")


def embedding(weight, ids):
    ids = np.asarray(ids)
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        _accum(weight, full)

    return _make(out, (weight,), bw, "embedding")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                _accum(t, part)

    return _make(out, tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, k, axis=axis))

    return _make(out, tensors, bw, "stack")


# --------------------------------------------------------------------- linalg
def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims: (..., p, q)^T @ (..., p, r) summed over batch
                ga = a.data.reshape(-1, a.shape[-1])
                _accum(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------- softmax & friends
def _stable_softmax(z, axis):
    zmax = np.max(z, axis=axis, keepdims=True)
    if np.isneginf(zmax).any():
        raise ValueError("softmax over a row where every entry is -inf")
    e = np.exp(z - zmax)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, tau=1.0, axis=-1):
    """Softmax of ``logits / tau``; -inf entries give exactly 0 and receive zero gradient."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    y = _stable_softmax(logits.data / tau, axis)

    def bw(g):
        gz = y * (g - (g * y).sum(axis=axis, keepdims=True))
        _accum(logits, gz / tau)

    return _make(y, (logits,), bw, "softmax")


def softmax_with_temperature(logits, tau):
    return softmax(logits, tau, axis=-1)


def log_softmax(logits, axis=-1):
    z = logits.data
    zmax = np.max(z, axis=axis, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        _accum(logits, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (logits,), bw, "log_softmax")


def cross_entropy(logits, targets, pad_id=None, reduction="mean"):
    """Negative log-likelihood of ``targets`` under ``logits [..., V]``.

    Positions whose target is ``pad_id`` are ignored.  ``reduction="mean"``
    averages over kept positions; ``"sum_per_row"`` returns one summed NLL per
    leading row (used for per-example log-likelihoods).
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    keep = np.ones_like(t, dtype=bool) if pad_id is None else t != pad_id
    if not keep.any():
        raise ValueError("cross_entropy: every position is padding")
    tt = np.where(keep, t, 0)
    if (tt < 0).any() or (tt >= V).any():
        raise ValueError("cross_entropy: target id out of range")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax - np.log(se))[np.arange(len(tt)), tt]
    nll = -logp * keep
    if reduction == "mean":
        count = keep.sum()
        out = np.array(nll.sum() / count)
        scale = np.full(len(tt), 1.0 / count)
    elif reduction == "sum_per_row":
        out = nll.reshape(targets.shape).sum(axis=-1)
        scale = None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        p = ez / se
        p[np.arange(len(tt)), tt] -= 1.0
        if scale is None:
            w = np.broadcast_to(np.expand_dims(g, -1), targets.shape).reshape(-1)
        else:
            w = scale * g
        p *= (w * keep)[:, None]
        _accum(logits, p.reshape(logits.shape))

    return _make(out, (logits,), bw, "cross_entropy")


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            _accum(x, inv / n * (n * gx - gx.sum(-1, keepdims=True)
                                 - xhat * (gx * xhat).sum(-1, keepdims=True)))

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def straight_through(hard, soft):
    """Forward value ``hard`` exactly; gradient flows to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=DTYPE)

    def bw(g):
        _accum(soft, g)

    return _make(hard.copy(), (soft,), bw, "straight_through")


# ------------------------------------------------------------- grad checking
def finite_diff_check(f, x, h=1e-4):
    """Max relative error between backward() and central differences.

    ``f`` maps the tensor ``x`` to a scalar tensor.  Returns
    ``max |g_ad - g_fd| / (|g_fd| + 1e-8)`` over all coordinates.
    """
    x.grad = None
    x.requires_grad = True
    loss = f(x)
    loss.backward()
    g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    g_fd = np.zeros_like(x.data)
    base = x.data.copy()
    flat = x.data.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            flat[k] = base.reshape(-1)[k] + h
            fp = f(x).item()
            flat[k] = base.reshape(-1)[k] - h
            fm = f(x).item()
            flat[k] = base.reshape(-1)[k]
            g_fd.reshape(-1)[k] = (fp - fm) / (2.0 * h)
    x.grad = None
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-8)))


# ------------------------------------------------------------------ optimizer
@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params`` (numpy arrays).

    ``lr`` is a scalar or a sequence with one learning rate per parameter.
    """
    lrs = np.broadcast_to(np.asarray(lr, dtype=DTYPE), (len(params),))
    if (lrs <= 0).any():
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v, rate in zip(params, grads, state.m, state.v, lrs):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam over parameter groups, each ``{"params": [Tensor...], "lr": float}``.

    A group may carry ``"row_mask"``: a dict mapping a parameter's id to a
    boolean row mask; masked rows are never updated (frozen embeddings).
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.groups = [dict(g) for g in groups]
        for g in self.groups:
            if not g["lr"] > 0:
                raise ValueError(f"learning rate must be positive, got {g['lr']}")
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)
        self.clip_norm = clip_norm
        self._params = [p for g in self.groups for p in g["params"]]
        self._lrs = [g["lr"] for g in self.groups for _ in g["params"]]
        self._frozen = {}
        for g in self.groups:
            self._frozen.update(g.get("row_mask", {}))

    def zero_grad(self):
        for p in self._params:
            p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self._params
                                 if p.grad is not None)))

    def step(self):
        grads = [p.grad for p in self._params]
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                grads = [None if g is None else g * (self.clip_norm / norm) for g in grads]
        saved = {}
        for p in self._params:
            mask = self._frozen.get(id(p))
            if mask is not None and mask.any():
                saved[id(p)] = (p, mask, p.data[mask].copy())
        adam_step([p.data for p in self._params], grads, self.state, self._lrs)
        for p, mask, rows in saved.values():
            p.data[mask] = rows
