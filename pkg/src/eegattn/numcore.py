"""Dense tensors with reverse-mode automatic differentiation.

Only what the encoder, the attention decoder and the transfer losses need.
Arrays are numpy ``float32`` by default; :func:`precision` switches the
working dtype (gradient checks run in ``float64``).

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure that pushes the output gradient back to them.  Each
node carries a global sequence number, so :func:`backward` can replay the
recorded operations in exact reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_dtype = np.dtype(np.float32)
_grad_enabled = True
_seq = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operations."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def current_dtype() -> np.dtype:
    return _dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item: expected a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = fn
        out.op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", fn)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def fn(g):
        _accumulate(x, g * (y > 0))

    return _result(y, (x,), "relu", fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def fn(g):
        _accumulate(x, g * (1 - y * y))

    return _result(y, (x,), "tanh", fn)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)

    def fn(g):
        _accumulate(x, g * y * (1 - y))

    return _result(y, (x,), "sigmoid", fn)


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    d = x.data
    if floor is not None:
        live = d > floor
        d = np.where(live, d, floor).astype(d.dtype)
    else:
        if np.any(d <= 0):
            raise FloatingPointError("log: non-positive input")
        live = None

    def fn(g):
        gx = g / d
        if live is not None:
            gx = gx * live
        _accumulate(x, gx)

    return _result(np.log(d), (x,), "log", fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), "softmax", fn)


# ----------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(out), (x,), "sum", fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _result(np.asarray(out, dtype=x.data.dtype), (x,), "mean", fn)


# ----------------------------------------------------------------- structure

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def fn(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(y, (x,), "reshape", fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        _accumulate(x, g.transpose(inv))

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def fn(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accumulate(x, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(y, xs, "concat", fn)


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"index_select: index out of range for axis {axis} of shape {x.shape}")

    def fn(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        _accumulate(x, gx)

    return _result(np.take(x.data, idx, axis=axis), (x,), "index_select", fn)


# ----------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a (..., k) @ b (k, m)`` or plain 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            _accumulate(b, a2.T @ g.reshape(-1, b.shape[1]))

    return _result(a.data @ b.data, (a, b), "matmul", fn)


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Rows of ``kh*kw*C`` patch values (kernel-row, kernel-col, channel order)."""
    n, hp, wp, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N, H, W, C, kh, kw)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * (hp - kh + 1) * (wp - kw + 1), kh * kw * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    ``x`` is channels-last ``(N, H, W, C)``; ``w`` is ``(O, C, kh, kw)`` with
    odd kernel sides; ``b`` is ``(O,)``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    o, c, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {w.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    pad = ((0, 0), (ph, ph), (pw, pw), (0, 0))
    cols = _im2col(np.pad(x.data, pad), kh, kw)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, h, wd, o)

    def fn(g):
        g2 = g.reshape(-1, o)
        if w.requires_grad:
            _accumulate(w, (cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1))
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            # input gradient = 'full' correlation of g with the flipped kernel
            wflip = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
            gcols = _im2col(np.pad(g, pad), kh, kw)
            _accumulate(x, (gcols @ wflip).reshape(x.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, "conv2d", fn)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling over the spatial axes of a channels-last tensor.

    Ties go to the first maximal element in row-major window order.
    """
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"maxpool2x2: need (N, H, W, C) with even H, W, got {x.shape}")
    n, h, w, c = x.shape
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        _accumulate(x, gx)

    return _result(out, (x,), "maxpool2x2", fn)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tensor requiring grad")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t.parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t.seq, reverse=True)
    _accumulate(loss, np.ones(loss.shape, dtype=loss.data.dtype))
    for t in order:
        if t.backward_fn is None:
            continue
        # interior buffers are released once pushed to the parents
        g, t.grad = t.grad, None
        if g is not None:
            t.backward_fn(g)


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------- checking

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               max_coords: int = 20, rng: np.random.Generator | None = None,
               kink_retries: int = 0, floor: float = 1e-8) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    Up to ``max_coords`` coordinates are sampled per parameter.

    With ``kink_retries > 0`` a coordinate whose forward and backward
    one-sided differences disagree by more than 1e-3 (relative) is treated as
    sitting within ``eps`` of a relu / max-pool kink and re-measured with
    ``eps / 10``, up to that many times.  Relative errors are taken against
    ``max(floor, |numeric|)``, so gradients below ``floor`` are compared
    absolutely (central differences cannot resolve them relatively).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: loss is not finite")
    f0 = loss.item()
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        k = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            old = flat[i]
            e = eps
            for attempt in range(kink_retries + 1):
                flat[i] = old + e
                with no_grad():
                    up = f().item()
                flat[i] = old - e
                with no_grad():
                    down = f().item()
                flat[i] = old
                fwd, bwd = (up - f0) / e, (f0 - down) / e
                if attempt == kink_retries or abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd), 1e-8):
                    break
                e /= 10
            num = (up - down) / (2 * e)
            an = analytic.reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(an)):
                raise FloatingPointError("grad_check: non-finite gradient")
            worst = max(worst, abs(an - num) / max(floor, abs(num)))
    for p in params:
        p.grad = None
    return float(worst)


# ----------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.data.dtype)

    def zero_grad(self) -> None:
        parameters_zero_grad(self.params)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        parameters_zero_grad(self.params)
