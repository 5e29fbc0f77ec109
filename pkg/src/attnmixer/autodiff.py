"""A small reverse-mode autodiff engine over dense float64 arrays.

Tensors are matrices. An optional leading batch axis is allowed so that a
mini-batch runs as one graph; every operation acts independently on each
2-D slice, and gradients flowing into unbatched operands (parameters) are
summed over the batch.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DomainError, NumericInputError, RankError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class FlopCounter:
    """Accumulates matmul FLOPs (2*m*n*k per 2-D product) while active."""

    def __init__(self):
        self.count = 0


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    stack = _counters()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


class Tensor:
    __slots__ = ("data", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.ravel()

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        return backward(self)


def parameter(data, name):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_matrix(x: Tensor, op: str):
    if x.data.ndim < 2:
        raise RankError(f"{op}: expected a matrix, got shape {x.shape}")


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_matrix(a, "matmul")
    _check_matrix(b, "matmul")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    # batched @ unbatched: fold the batch into rows (one 2-D product)
    folded = b.data.ndim == 2 and a.data.ndim > 2
    if folded:
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)
    stack = _counters()
    if stack:
        batch = int(np.prod(out.shape[:-2], dtype=np.int64))
        for c in stack:
            c.count += 2 * m * n * k * batch

    def _bw(g):
        ga = gb = None
        if folded:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, _swap(b.data)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(_swap(a.data), g), b.shape)
        return ga, gb

    return _make(out, (a, b), _bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _check_matrix(a, "transpose")
    return _make(_swap(a.data), (a,), lambda g: (_swap(g),))


def affine(x, w, b) -> Tensor:
    """x @ w + b with identity activation; ``b`` is a 1 x d_out row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if b.shape != (1, w.shape[-1]):
        raise ShapeError(f"affine: bias shape {b.shape} does not match weight shape {w.shape}")
    return add(matmul(x, w), b)


def rows(x, start, stop) -> Tensor:
    """Rows ``start:stop`` of every 2-D slice."""
    x = as_tensor(x)
    _check_matrix(x, "rows")

    def _bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _make(x.data[..., start:stop, :].copy(), (x,), _bw)


# ---------------------------------------------------------------- elementwise

def _binary_shapes_ok(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"elementwise: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes_ok(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive entry")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "abs": absolute,
    "log": log, "neg": neg, "square": square, "sigmoid": sigmoid, "tanh": tanh,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), _bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalisation

def softmax_rows(a) -> Tensor:
    """Row-wise softmax over the last axis (max-subtracted)."""
    a = as_tensor(a)
    _check_matrix(a, "softmax_rows")
    if not np.all(np.isfinite(a.data)):
        raise NumericInputError("softmax_rows: non-finite logits")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), _bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each row over its last axis (population variance), then gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match rows of length {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), _bw)


# ---------------------------------------------------------------- recurrence

def _sig(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gru_sequence(xz, xr, xh, u_z, u_r, u_h, b_z, b_r, b_h) -> Tensor:
    """Final hidden state of a GRU run from h=0 over pre-projected inputs.

    ``xz``, ``xr``, ``xh`` hold the input projections for every step, shape
    (..., steps, H). Per step::

        z = sig(xz_t + h U_z + b_z)      r = sig(xr_t + h U_r + b_r)
        c = tanh(xh_t + (r*h) U_h + b_h) h = (1 - z) * h + z * c

    One graph node; the backward pass runs through time by hand. The three
    recurrent products are reported to active FLOP counters.
    """
    xz, xr, xh = as_tensor(xz), as_tensor(xr), as_tensor(xh)
    u_z, u_r, u_h, b_z, b_r, b_h = map(as_tensor, (u_z, u_r, u_h, b_z, b_r, b_h))
    lead = xz.shape[:-2]
    steps, H = xz.shape[-2:]
    for t in (xr, xh):
        if t.shape != xz.shape:
            raise ShapeError(f"gru_sequence: input projections differ: {xz.shape} vs {t.shape}")
    for u in (u_z, u_r, u_h):
        if u.shape != (H, H):
            raise ShapeError(f"gru_sequence: recurrent weight {u.shape}, expected {(H, H)}")
    for b in (b_z, b_r, b_h):
        if b.shape != (1, H):
            raise ShapeError(f"gru_sequence: bias {b.shape}, expected {(1, H)}")
    XZ = xz.data.reshape(-1, steps, H)
    XR = xr.data.reshape(-1, steps, H)
    XH = xh.data.reshape(-1, steps, H)
    n = XZ.shape[0]
    stack = _counters()
    for c in stack:
        c.count += 3 * 2 * H * H * n * steps
    hs = np.zeros((steps + 1, n, H))
    zs, rs, cs = (np.empty((steps, n, H)) for _ in range(3))
    for t in range(steps):
        h = hs[t]
        z = _sig(XZ[:, t] + h @ u_z.data + b_z.data)
        r = _sig(XR[:, t] + h @ u_r.data + b_r.data)
        cand = np.tanh(XH[:, t] + (r * h) @ u_h.data + b_h.data)
        hs[t + 1] = h + z * (cand - h)
        zs[t], rs[t], cs[t] = z, r, cand
    out = hs[steps].reshape(lead + (1, H))

    def _bw(g):
        dXZ, dXR, dXH = np.zeros_like(XZ), np.zeros_like(XR), np.zeros_like(XH)
        dUz, dUr, dUh = np.zeros((H, H)), np.zeros((H, H)), np.zeros((H, H))
        dh = g.reshape(n, H).copy()
        for t in range(steps - 1, -1, -1):
            h, z, r, cand = hs[t], zs[t], rs[t], cs[t]
            dz = dh * (cand - h)
            dc = dh * z
            dh_prev = dh * (1.0 - z)
            dah = dc * (1.0 - cand * cand)
            rh = r * h
            dUh += rh.T @ dah
            drh = dah @ u_h.data.T
            dh_prev += drh * r
            dar = drh * h * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dUr += h.T @ dar
            dUz += h.T @ daz
            dh_prev += dar @ u_r.data.T + daz @ u_z.data.T
            dXZ[:, t], dXR[:, t], dXH[:, t] = daz, dar, dah
            dh = dh_prev
        shape = xz.shape
        return (dXZ.reshape(shape), dXR.reshape(shape), dXH.reshape(shape), dUz, dUr, dUh,
                dXZ.sum(axis=(0, 1))[None, :], dXR.sum(axis=(0, 1))[None, :], dXH.sum(axis=(0, 1))[None, :])

    return _make(out, (xz, xr, xh, u_z, u_r, u_h, b_z, b_r, b_h), _bw)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from leaf name to its gradient array (named leaves only).
    """
    if root.data.size != 1:
        raise RankError(f"backward: root must be a scalar, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    named = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return named


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def grad_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``params`` is a mapping name -> Tensor or an iterable of Tensors. The
    denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if isinstance(params, Mapping):
        params = list(params.values())
    unique = list({id(p): p for p in params}.values())
    zero_grad(unique)
    backward(loss_fn())
    worst = 0.0
    for p in unique:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            with no_grad():
                f_plus = float(loss_fn().data.sum())
            p.data[idx] = orig - h
            with no_grad():
                f_minus = float(loss_fn().data.sum())
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    zero_grad(unique)
    return worst
