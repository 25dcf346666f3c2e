"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything trainable in this package (MLP weights, the low-rank filter
bank) lives in a :class:`DTensor`. Forward operations record a backward
closure on a dynamic tape; ``loss.backward()`` walks the tape in reverse
topological order and accumulates ``d loss / d tensor`` into ``.grad``
(+= semantics, callers zero explicitly). All storage is float64 and all
operations are plain numpy, so repeated evaluation with identical inputs
is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, RoseError, ShapeError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64, order="C")


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses tape construction (evaluation paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class DTensor:
    """A float64 array plus optional gradient and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DTensor":
        """A constant view of this tensor's values (shares the array)."""
        return DTensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DTensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- gradient accumulation ------------------------------------------

    def _accum(self, g: np.ndarray, owned: bool):
        """Add ``g`` into ``.grad``. ``owned`` marks a freshly allocated
        array that may be adopted without copying."""
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g if owned else g.copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        ``self`` must be scalar (size 1).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo: list[DTensor] = []
        seen: set[int] = set()
        stack: list[tuple[DTensor, bool]] = [(self, False)]
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
        self._accum(np.ones_like(self.data), owned=True)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> DTensor:
    """A leaf tensor that participates in optimization."""
    return DTensor(data, requires_grad=True, name=name)


def constant(data) -> DTensor:
    return data if isinstance(data, DTensor) else DTensor(data)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# -- broadcasting helpers -------------------------------------------------


def _check_broadcast(sa, sb, opname):
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {sa} and {sb} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape) -> tuple[np.ndarray, bool]:
    """Reduce ``g`` back to ``shape``; second value is True when a fresh
    array was produced (safe to adopt)."""
    if g.shape == tuple(shape):
        return g, False
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g, True


def _make(data: np.ndarray, parents, backward) -> DTensor:
    out = DTensor.__new__(DTensor)
    out.data = data
    out.grad = None
    out.name = None
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# -- elementwise binary ops -----------------------------------------------


def add(a, b) -> DTensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def bwd(g):
        ga, fa = _unbroadcast(g, a.shape)
        a._accum(ga, fa)
        gb, fb = _unbroadcast(g, b.shape)
        b._accum(gb, fb)

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> DTensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape, "sub")
    out_data = a.data - b.data

    def bwd(g):
        ga, fa = _unbroadcast(g, a.shape)
        a._accum(ga, fa)
        gb, fb = _unbroadcast(-g, b.shape)
        b._accum(gb, True)

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> DTensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            ga, _ = _unbroadcast(g * b.data, a.shape)
            a._accum(ga, True)
        if b.requires_grad:
            gb, _ = _unbroadcast(g * a.data, b.shape)
            b._accum(gb, True)

    return _make(out_data, (a, b), bwd)


def div(a, b) -> DTensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.shape, b.shape, "div")
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            ga, _ = _unbroadcast(g / b.data, a.shape)
            a._accum(ga, True)
        if b.requires_grad:
            gb, _ = _unbroadcast(-g * out_data / b.data, b.shape)
            b._accum(gb, True)

    return _make(out_data, (a, b), bwd)


def neg(a) -> DTensor:
    a = constant(a)

    def bwd(g):
        a._accum(-g, True)

    return _make(-a.data, (a,), bwd)


# -- matmul ----------------------------------------------------------------


def matmul(a, b) -> DTensor:
    """2-D matrix product (n,k) @ (k,m) -> (n,m)."""
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not (n,k)@(k,m)")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T, True)
        if b.requires_grad:
            b._accum(a.data.T @ g, True)

    return _make(out_data, (a, b), bwd)


def linear(x, w, b) -> DTensor:
    """Fused x @ w + b (row-broadcast bias); same math, one tape node."""
    x, w, b = constant(x), constant(w), constant(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"linear: shapes x{x.shape} w{w.shape} b{b.shape} are not (n,k)@(k,m)+(m,)"
        )
    out_data = x.data @ w.data
    out_data += b.data

    def bwd(g):
        if x.requires_grad:
            x._accum(g @ w.data.T, True)
        if w.requires_grad:
            w._accum(x.data.T @ g, True)
        if b.requires_grad:
            b._accum(g.sum(axis=0), True)

    return _make(out_data, (x, w, b), bwd)


# -- elementwise unary ops ---------------------------------------------------


def exp(a) -> DTensor:
    a = constant(a)
    out_data = np.exp(a.data)

    def bwd(g):
        a._accum(g * out_data, True)

    return _make(out_data, (a,), bwd)


def sin(a) -> DTensor:
    a = constant(a)
    out_data = np.sin(a.data)

    def bwd(g):
        a._accum(g * np.cos(a.data), True)

    return _make(out_data, (a,), bwd)


def asin(a) -> DTensor:
    a = constant(a)
    if a.data.size and (np.min(a.data) < -1.0 or np.max(a.data) > 1.0):
        raise DomainError(
            f"asin: inputs must lie in [-1, 1], got range "
            f"[{np.min(a.data):.6g}, {np.max(a.data):.6g}]"
        )
    out_data = np.arcsin(a.data)

    def bwd(g):
        a._accum(g / np.sqrt(1.0 - a.data * a.data), True)

    return _make(out_data, (a,), bwd)


def relu(a) -> DTensor:
    a = constant(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accum(g * (a.data > 0.0), True)

    return _make(out_data, (a,), bwd)


def sigmoid(a) -> DTensor:
    a = constant(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a._accum(g * out_data * (1.0 - out_data), True)

    return _make(out_data, (a,), bwd)


def softplus(a) -> DTensor:
    """log(1 + e^x), computed stably; derivative is sigmoid(x)."""
    a = constant(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        a._accum(g * s, True)

    return _make(out_data, (a,), bwd)


def square(a) -> DTensor:
    a = constant(a)

    def bwd(g):
        a._accum(g * (2.0 * a.data), True)

    return _make(a.data * a.data, (a,), bwd)


def tabs(a) -> DTensor:
    """|x| with sign(x) subgradient (0 at x = 0)."""
    a = constant(a)

    def bwd(g):
        a._accum(g * np.sign(a.data), True)

    return _make(np.abs(a.data), (a,), bwd)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> DTensor:
    a = constant(a)
    out_data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            ga = np.broadcast_to(g.reshape((1,) * a.ndim), a.shape)
        elif keepdims:
            ga = np.broadcast_to(g, a.shape)
        else:
            ga = np.broadcast_to(np.expand_dims(g, axis), a.shape)
        a._accum(ga, False)

    return _make(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> DTensor:
    a = constant(a)
    out_data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def bwd(g):
        if axis is None:
            ga = np.broadcast_to(g.reshape((1,) * a.ndim), a.shape)
        elif keepdims:
            ga = np.broadcast_to(g, a.shape)
        else:
            ga = np.broadcast_to(np.expand_dims(g, axis), a.shape)
        a._accum(ga / n, True)

    return _make(out_data, (a,), bwd)


def cumsum_exclusive(a, axis: int = -1) -> DTensor:
    """y[..., n] = sum of x[..., :n]; y starts at 0 along ``axis``."""
    a = constant(a)
    inc = np.cumsum(a.data, axis=axis)
    out_data = np.zeros_like(a.data)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out_data[tuple(dst)] = inc[tuple(src)]

    def bwd(g):
        # d/dx_j = sum of g_n over n > j
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        a._accum(rev - g, True)

    return _make(out_data, (a,), bwd)


def softmax(a) -> DTensor:
    """Softmax over the last axis; rows sum to 1."""
    a = constant(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        gy = g * out_data
        a._accum(gy - out_data * gy.sum(axis=-1, keepdims=True), True)

    return _make(out_data, (a,), bwd)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape) -> DTensor:
    a = constant(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.shape), False)

    return _make(out_data, (a,), bwd)


def broadcast_to(a, shape) -> DTensor:
    a = constant(a)
    _check_broadcast(a.shape, shape, "broadcast_to")
    out_data = np.broadcast_to(a.data, shape)

    def bwd(g):
        ga, fresh = _unbroadcast(g, a.shape)
        a._accum(ga, fresh)

    return _make(out_data, (a,), bwd)


def concat(tensors, axis: int = -1) -> DTensor:
    tensors = [constant(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)], False)

    return _make(out_data, tuple(tensors), bwd)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, DTensor], state: AdamState, lr: float) -> None:
    """One Adam update with bias correction over named parameters.

    Grads are left untouched; the caller zeroes them.
    """
    for name, p in params.items():
        if p.grad is None:
            raise RoseError(f"adam_step: parameter {name!r} has no gradient; run backward() first")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class CosineSchedule:
    """Cyclic cosine decay: restarts at ``base_lr`` every ``period`` steps."""

    base_lr: float = 5e-4
    period: int = 2500
    floor_lr: float = 0.0


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    if schedule.period <= 0:
        raise DomainError(f"cosine_lr: period must be positive, got {schedule.period}")
    phase = (step % schedule.period) / schedule.period
    span = schedule.base_lr - schedule.floor_lr
    return float(schedule.floor_lr + span * 0.5 * (1.0 + np.cos(np.pi * phase)))
