"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the decomposition loss needs are provided. Every op
returns a new :class:`Tensor`; if any input requires a gradient, the output
remembers its parents and a closure mapping the output adjoint to the parent
adjoints. :func:`backward` sorts that graph into a :class:`Tape` and sweeps it
once in reverse. Storage and accumulation are float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_FLOOR = np.finfo(np.float64).eps


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ShapeError(f"rank {self.data.ndim} tensors are not supported")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return negate(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data.copy())


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(sa, sb):
    if sa == sb or len(sa) == 0 or len(sb) == 0 or int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, op, forward, local):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = forward(a.data, b.data)

    def backward(g):
        da, db = local(a.data, b.data, out)
        return _unbroadcast(g * da, a.shape), _unbroadcast(g * db, b.shape)

    return _make(out, (a, b), backward, op)


def _guarded(x):
    return np.where(np.abs(x) < EPS_FLOOR, np.where(x < 0, -EPS_FLOOR, EPS_FLOOR), x)


def add(a, b):
    return _binary(a, b, "add", np.add, lambda x, y, o: (1.0, 1.0))


def sub(a, b):
    return _binary(a, b, "sub", np.subtract, lambda x, y, o: (1.0, -1.0))


def mul(a, b):
    return _binary(a, b, "mul", np.multiply, lambda x, y, o: (y, x))


def div(a, b):
    def local(x, y, o):
        ys = _guarded(y)
        return 1.0 / ys, -x / (ys * ys)

    return _binary(a, b, "div", np.divide, local)


def atan2(y, x):
    """Elementwise ``atan2(y, x)``; both partials are zero where y = x = 0."""

    def local(yv, xv, o):
        r2 = np.maximum(xv * xv + yv * yv, EPS_FLOOR)
        return xv / r2, -yv / r2

    return _binary(y, x, "atan2", np.arctan2, local)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _wrap(x):
    w = x - 2.0 * np.pi * np.round(x / (2.0 * np.pi))
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


# name -> (forward, local derivative as a function of input and output)
UNARY_RULES: dict[str, tuple[Callable, Callable]] = {
    "negate": (np.negative, lambda x, y: -np.ones_like(x)),
    "abs": (np.abs, lambda x, y: np.sign(x)),
    "exp": (np.exp, lambda x, y: y),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "wrap_angle": (_wrap, lambda x, y: np.ones_like(x)),
}


def _unary(a, op, forward, deriv):
    a = as_tensor(a)
    out = forward(a.data)
    return _make(out, (a,), lambda g: (g * deriv(a.data, out),), op)


def _rule(name):
    def fn(a):
        forward, deriv = UNARY_RULES[name]
        return _unary(a, name, forward, deriv)

    fn.__name__ = name
    return fn


negate = _rule("negate")
abs_ = _rule("abs")
exp = _rule("exp")
sigmoid = _rule("sigmoid")
tanh = _rule("tanh")
relu = _rule("relu")
wrap_angle = _rule("wrap_angle")
wrap_angle.__doc__ = "Map angles into (-pi, pi]; the derivative is 1 away from the seam."


def power(a, exponent: float):
    p = float(exponent)
    return _unary(a, "pow", lambda x: np.power(x, p), lambda x, y: p * np.power(x, p - 1.0))


def clamp(a, lo: float, hi: float):
    """Clip to [lo, hi]; gradient flows only strictly inside the interval."""
    return _unary(
        a,
        "clamp",
        lambda x: np.clip(x, lo, hi),
        lambda x, y: ((x > lo) & (x < hi)).astype(np.float64),
    )


def take(a, index):
    """Basic (slice/int) indexing with a scatter adjoint."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.array(out), (a,), backward, "take")


# ---------------------------------------------------------------------------
# reductions


def _reduce_input(a):
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("cannot reduce an empty tensor")
    return a


def sum_(a):
    a = _reduce_input(a)
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a):
    a = _reduce_input(a)
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def l1(a):
    a = _reduce_input(a)
    return _make(np.abs(a.data).sum(), (a,), lambda g: (g * np.sign(a.data),), "l1")


def fro(a):
    a = _reduce_input(a)
    val = np.sqrt(np.sum(a.data * a.data))
    return _make(val, (a,), lambda g: (g * a.data / max(val, EPS_FLOOR),), "fro")


def fro_sq(a):
    a = _reduce_input(a)
    return _make(np.sum(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,), "fro_sq")


REDUCTIONS = {"sum": sum_, "mean": mean, "l1": l1, "fro": fro, "fro_sq": fro_sq}


def reduce(op: str, a):
    try:
        return REDUCTIONS[op](a)
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None


# ---------------------------------------------------------------------------
# spatial


def spatial_diff(a, axis: str):
    """Forward difference along ``"h"`` (last axis) or ``"v"`` (second to last).

    The final column/row of the result is zero, matching
    :func:`sidnism.image_core.spatial_gradients` sample for sample.
    """
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError("spatial_diff needs a tensor of rank >= 2")
    if axis in ("h", "horizontal"):
        ax = a.data.ndim - 1
    elif axis in ("v", "vertical"):
        ax = a.data.ndim - 2
    else:
        raise ValueError(f"axis must be 'h' or 'v', got {axis!r}")
    head = [slice(None)] * a.data.ndim
    tail = [slice(None)] * a.data.ndim
    head[ax] = slice(1, None)
    tail[ax] = slice(None, -1)
    head, tail = tuple(head), tuple(tail)
    out = np.zeros_like(a.data)
    out[tail] = a.data[head] - a.data[tail]

    def backward(g):
        gi = np.zeros_like(a.data)
        gi[head] += g[tail]
        gi[tail] -= g[tail]
        return (gi,)

    return _make(out, (a,), backward, f"diff_{'h' if ax == a.data.ndim - 1 else 'v'}")


def _im2col(x4):
    """(N, C, H, W) -> (N*H*W, C*9) patches of the zero-padded input."""
    n, c, h, w = x4.shape
    padded = np.pad(x4, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _correlate(x4, kernel):
    n, _, h, w = x4.shape
    c_out = kernel.shape[0]
    out = _im2col(x4) @ kernel.reshape(c_out, -1).T
    return out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)


def conv2d(x, kernel, bias):
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``kernel`` is
    (C_out, C_in, 3, 3) and ``bias`` (C_out,).
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError("conv2d only supports 3x3 kernels")
    if xd.shape[1] != c_in:
        raise ShapeError(f"input has {xd.shape[1]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    n, _, h, w = xd.shape

    cols = _im2col(xd)
    out = (cols @ kernel.data.reshape(c_out, -1).T).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out if batched else out[0])

    def backward(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        dkernel = (gmat.T @ cols).reshape(kernel.shape)
        dbias = g4.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            # adjoint of a same-padded correlation: correlate with the flipped, transposed kernel
            flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = _correlate(g4, flipped)
            dx = np.ascontiguousarray(dx if batched else dx[0])
        return dx, dkernel, dbias

    return _make(out, (x, kernel, bias), backward, "conv2d")


# ---------------------------------------------------------------------------
# backward


@dataclass
class Tape:
    """Nodes reachable from a loss, inputs before outputs."""

    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def build_tape(root: Tensor) -> Tape:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return Tape(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Intermediate adjoints live only for the duration of the sweep, so calling
    this twice on the same graph adds the gradient twice.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = build_tape(loss)
    if not loss.requires_grad:
        return tape
    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            key = id(parent)
            adjoints[key] = adjoints[key] + pg if key in adjoints else pg
    return tape


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``."""
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    numeric = np.zeros_like(base)
    probe = base.copy()
    flat, nflat = probe.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(Tensor(probe)).data)
        flat[i] = orig - h
        down = float(f(Tensor(probe)).data)
        flat[i] = orig
        nflat[i] = (up - down) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
