"""Differentiable array operations on a minimal reverse-mode tape.

Every network block in the tracker is composed from the operators in this
module. Each operator computes its forward value with numpy and records a
hand-written backward closure; `backward` replays the recorded graph in
reverse topological order. Training arithmetic is float64 throughout; a
float32 path exists for inference-only benchmarking (cast the parameters
and inputs, the operators preserve dtype).

All operators are pure functions of their inputs, so forward evaluation is
deterministic and thread-safe. A recorded graph belongs to the thread that
built it and must not be shared.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "tritrack_grad_enabled", default=True
)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff.

    Feature maps are rank-3 tensors laid out (channels, height, width).
    Parameters are tensors created with `parameter`, which allocates a
    same-shaped `grad` buffer that optimizers consume.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], tuple[Array | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every requires-grad leaf."""
        for t, g in backward(self).items():
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # Light operator sugar; the function forms below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    t.zero_grad()
    return t


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward_fn()
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(root: Tensor) -> dict[Tensor, Array]:
    """Run reverse-mode accumulation from a scalar root.

    Returns a mapping from every requires-grad leaf tensor reached by the
    sweep to its gradient. The mapping is local to the call, so concurrent
    backward passes over disjoint graphs never contend.
    """
    if root.data.size != 1:
        raise ShapeError("backward requires a scalar root")
    grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, Array] = {}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaves


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data + b.data

    def bw():
        def run(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return run

    return _node(data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data - b.data

    def bw():
        def run(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

        return run

    return _node(data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data * b.data

    def bw():
        ad, bd = a.data, b.data

        def run(g):
            return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

        return run

    return _node(data, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data / b.data

    def bw():
        ad, bd = a.data, b.data

        def run(g):
            return (
                _unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape),
            )

        return run

    return _node(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw():
        def run(g):
            return (-g,)

        return run

    return _node(-a.data, (a,), bw)


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min; at ties the gradient routes to the first operand."""
    b = _wrap(b, a)
    data = np.minimum(a.data, b.data)

    def bw():
        take_a = a.data <= b.data

        def run(g):
            return (
                _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
            )

        return run

    return _node(data, (a, b), bw)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; at ties the gradient routes to the first operand."""
    b = _wrap(b, a)
    data = np.maximum(a.data, b.data)

    def bw():
        take_a = a.data >= b.data

        def run(g):
            return (
                _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
            )

        return run

    return _node(data, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bw():
        mask = a.data > 0.0

        def run(g):
            return (g * mask,)

        return run

    return _node(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw():
        def run(g):
            return (g * data,)

        return run

    return _node(data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw():
        def run(g):
            return (g * (1.0 - data * data),)

        return run

    return _node(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_arr(a.data)

    def bw():
        def run(g):
            return (g * data * (1.0 - data),)

        return run

    return _node(data, (a,), bw)


def _sigmoid_arr(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    data = np.logaddexp(0.0, a.data)

    def bw():
        s = _sigmoid_arr(a.data)

        def run(g):
            return (g * s,)

        return run

    return _node(data, (a,), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    """a ** p for a constant exponent (a > 0 unless p is a positive integer)."""
    data = a.data**p

    def bw():
        d = p * a.data ** (p - 1.0)

        def run(g):
            return (g * d,)

        return run

    return _node(data, (a,), bw)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw():
        def run(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)

        return run

    return _node(data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def bw():
        def run(g):
            return (np.broadcast_to(g, a.data.shape).copy(),)

        return run

    return _node(data, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean())

    def bw():
        def run(g):
            return (np.broadcast_to(g / n, a.data.shape).copy(),)

        return run

    return _node(data, (a,), bw)


def reduce_mean(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([a.data.shape[ax] for ax in axes]))

    def bw():
        def run(g):
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            return (np.broadcast_to(gg / n, a.data.shape).copy(),)

        return run

    return _node(data, (a,), bw)


def reduce_max(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Max over axes; gradient routes to the first attaining position."""
    data = a.data.max(axis=axis, keepdims=keepdims)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)

    def bw():
        expanded = a.data.max(axis=axes, keepdims=True)
        hit = a.data == expanded
        # keep only the first max along the reduced axes
        flat_axes = tuple(sorted(axes))
        cum = hit
        for ax in flat_axes:
            first = np.cumsum(cum, axis=ax) == 1
            cum = cum & first
        mask = cum

        def run(g):
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, flat_axes)
            return (mask * gg,)

        return run

    return _node(data, (a,), bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """(c, h, w) -> (c,) spatial mean."""
    if a.ndim != 3:
        raise ShapeError("global_avg_pool expects (c, h, w)")
    return reduce_mean(a, axis=(1, 2))


def global_max_pool(a: Tensor) -> Tensor:
    """(c, h, w) -> (c,) spatial max."""
    if a.ndim != 3:
        raise ShapeError("global_max_pool expects (c, h, w)")
    return reduce_max(a, axis=(1, 2))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw():
        def run(g):
            return (g.reshape(a.data.shape),)

        return run

    return _node(data, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    data = np.transpose(a.data, axes)

    def bw():
        inv = np.argsort(axes)

        def run(g):
            return (np.transpose(g, inv),)

        return run

    return _node(data, (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)

    def bw():
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def run(g):
            return tuple(np.split(g, splits, axis=axis))

        return run

    return _node(data, tuple(parts), bw)


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along an axis; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)

    def bw():
        def run(g):
            out = np.zeros_like(a.data)
            if axis == 0:
                np.add.at(out, idx, g)
            else:
                moved = np.moveaxis(out, axis, 0)
                np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            return (out,)

        return run

    return _node(data, (a,), bw)


def stack_mean(parts: Sequence[Tensor]) -> Tensor:
    """Elementwise mean over a list of same-shaped tensors.

    Values are summed in sorted order per position, so the result is
    bit-identical under any permutation of the inputs (float addition is
    not associative; a canonical order makes the rounding canonical).
    """
    parts = list(parts)
    n = len(parts)
    stacked = np.sort(np.stack([p.data for p in parts]), axis=0)
    data = stacked.sum(axis=0) / n

    def bw():
        def run(g):
            return tuple(g / n for _ in parts)

        return run

    return _node(data, tuple(parts), bw)


def stack_max(parts: Sequence[Tensor]) -> Tensor:
    """Elementwise max over a list; ties route the gradient to the earliest."""
    parts = list(parts)
    stacked = np.stack([p.data for p in parts])
    arg = stacked.argmax(axis=0)
    data = stacked.max(axis=0)

    def bw():
        def run(g):
            return tuple(np.where(arg == k, g, 0.0) for k in range(len(parts)))

        return run

    return _node(data, tuple(parts), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    data = a.data @ b.data

    def bw():
        ad, bd = a.data, b.data

        def run(g):
            return g @ bd.T, ad.T @ g

        return run

    return _node(data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b for x of shape (in,) or (n, in); w is (out, in)."""
    if w.ndim != 2 or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: x {x.data.shape} incompatible with w {w.data.shape}"
        )
    data = x.data @ w.data.T
    if b is not None:
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw():
        xd, wd = x.data, w.data

        def run(g):
            gx = g @ wd
            if xd.ndim == 1:
                gw = np.outer(g, xd)
                gb = g.copy()
            else:
                gw = g.T @ xd
                gb = g.sum(axis=0)
            if b is None:
                return gx, gw
            return gx, gw, gb

        return run

    return _node(data, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution of a (ci, h, w) map with (co, ci, kh, kw) weights.

    Output spatial dims follow floor((dim + 2*pad - k) / stride) + 1. The
    backward pass produces gradients for the input, the weights, and the
    bias; the im2col patch matrix is cached only when a gradient is needed.
    """
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeError("conv2d expects (ci,h,w) input and (co,ci,kh,kw) weights")
    ci, h, w_in = xd.shape
    co, ci_w, kh, kw = wd.shape
    if ci_w != ci:
        raise ShapeError(f"conv2d: input has {ci} channels, weights expect {ci_w}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w_in + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad))) if pad else xd
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(oh, ow, ci, kh, kw),
        strides=(s1 * stride, s2 * stride, s0, s1, s2),
        writeable=False,
    )
    cols = win.reshape(oh * ow, ci * kh * kw)
    y = cols @ wd.reshape(co, -1).T
    if b is not None:
        y = y + b.data
    data = np.ascontiguousarray(y.T).reshape(co, oh, ow)
    parents = (x, w) if b is None else (x, w, b)

    def bw():
        cols_saved = np.ascontiguousarray(cols)

        def run(g):
            gy = g.reshape(co, -1)  # (co, oh*ow)
            gw = (gy @ cols_saved).reshape(wd.shape)
            gcols = (gy.T @ wd.reshape(co, -1)).reshape(oh, ow, ci, kh, kw)
            gxp = np.zeros((ci, h + 2 * pad, w_in + 2 * pad), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u : u + oh * stride : stride, v : v + ow * stride : stride] += (
                        gcols[:, :, :, u, v].transpose(2, 0, 1)
                    )
            gx = gxp[:, pad : pad + h, pad : pad + w_in] if pad else gxp
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(1, 2))

        return run

    return _node(data, parents, bw)


# ---------------------------------------------------------------------------
# sampling


def bilinear_weights(px: float, py: float, h: int, w: int):
    """Corner indices, weights and validity for one bilinear sample.

    Coordinates are in array index space (integer coordinates land exactly
    on grid cells). Outside [-1, w] x [-1, h] the sample is entirely zero;
    corners falling off the grid contribute zero (zero-padding semantics).
    Returns (ys, xs, ws, inside) with four corners each.
    """
    if px < -1.0 or px > w or py < -1.0 or py > h:
        return np.zeros(4, np.intp), np.zeros(4, np.intp), np.zeros(4), False
    x0 = math.floor(px)
    y0 = math.floor(py)
    lx, ly = px - x0, py - y0
    xs = np.array([x0, x0 + 1, x0, x0 + 1], dtype=np.intp)
    ys = np.array([y0, y0, y0 + 1, y0 + 1], dtype=np.intp)
    ws = np.array([(1 - lx) * (1 - ly), lx * (1 - ly), (1 - lx) * ly, lx * ly])
    valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    ws = ws * valid
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    return ys, xs, ws, True


def bilinear_sample(fm: Tensor, px: float, py: float) -> Tensor:
    """Sample a (c, h, w) map at one fractional location -> (c,) vector."""
    if fm.ndim != 3:
        raise ShapeError("bilinear_sample expects (c, h, w)")
    c, h, w = fm.data.shape
    ys, xs, ws, inside = bilinear_weights(px, py, h, w)
    if not inside:
        data = np.zeros(c, dtype=fm.data.dtype)
    else:
        data = (fm.data[:, ys, xs] * ws).sum(axis=1)

    def bw():
        def run(g):
            gf = np.zeros_like(fm.data)
            if inside:
                for k in range(4):
                    if ws[k] != 0.0:
                        gf[:, ys[k], xs[k]] += g * ws[k]
            return (gf,)

        return run

    return _node(data, (fm,), bw)
