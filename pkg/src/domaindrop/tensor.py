"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a tracked
tensor.  :func:`backward` sweeps the tape in reverse and returns one
gradient per watched leaf.  All ops accept an optional leading batch axis;
per-sample shapes are the documented ones.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "conv2d",
    "global_avg_pool",
    "relu",
    "softmax_t",
    "log_softmax",
    "cross_entropy",
    "kl_div",
    "grl",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self) -> None:
        self.parents: list[tuple[int | None, ...]] = []
        self.backward_fns: list[BackwardFn | None] = []
        self.kinds: list[str] = []
        self.shapes: list[tuple[int, ...]] = []
        self.leaves: list[int] = []
        self._leaf_tensors: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def watch(self, value) -> "Tensor":
        """Register ``value`` as a tracked leaf and return its tensor handle."""
        data = np.array(value, dtype=np.float64)
        node = self._record("leaf", (), None, data.shape)
        self.leaves.append(node)
        t = Tensor(data, tape=self, node=node)
        self._leaf_tensors.append(t)
        return t

    def _record(self, kind, parents, fn, shape) -> int:
        self.kinds.append(kind)
        self.parents.append(tuple(parents))
        self.backward_fns.append(fn)
        self.shapes.append(tuple(shape))
        return len(self.kinds) - 1


class Tensor:
    """A float64 array, optionally tied to a node on a :class:`Tape`."""

    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    tape = None
    for t in inputs:
        if t.tracked:
            if tape is not None and t.tape is not tape:
                raise ValueError("tensors from different tapes cannot be combined")
            tape = t.tape
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node if t.tracked else None for t in inputs)
    node = tape._record(kind, parents, fn, data.shape)
    return Tensor(data, tape=tape, node=node)


def backward(tape: Tape, loss: Tensor) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every watched leaf, in watch order.

    Leaves the loss does not depend on get zeros.  Each leaf tensor also
    has its ``.grad`` attribute set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape)
    if loss.tracked:
        if loss.tape is not tape:
            raise ValueError("loss was not recorded on this tape")
        grads[loss.node] = np.ones(tape.shapes[loss.node])
        for node in range(loss.node, -1, -1):
            g = grads[node]
            fn = tape.backward_fns[node]
            if g is None or fn is None:
                continue
            for parent, pg in zip(tape.parents[node], fn(g)):
                if parent is None or pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg.copy()
                else:
                    grads[parent] += pg
    out = []
    for node, leaf in zip(tape.leaves, tape._leaf_tensors):
        g = grads[node]
        if g is None:
            g = np.zeros(tape.shapes[node])
        leaf.grad = g
        out.append(g)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _result("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


# reductions and shape ----------------------------------------------------


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.sum(x.data, axis=axis), (x,), fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _result("transpose", x.data.T, (x,), lambda g: (g.T,))


# linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D operands; dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x, w) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is ``C_in×H×W`` or ``N×C_in×H×W``; ``w`` is ``C_out×C_in×kh×kw``.
    """
    x, w = as_tensor(x), as_tensor(w)
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    wd = w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects C×H×W (or N×C×H×W) input and 4-D kernel, got {x.shape}, {w.shape}")
    n, c_in, h, wid = xd.shape
    c_out, c_in_w, kh, kw = wd.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, kernel {c_in_w}")
    if kh > h or kw > wid:
        raise ValueError(f"conv2d kernel {kh}×{kw} larger than input {h}×{wid}")
    ho, wo = h - kh + 1, wid - kw + 1
    # windows: N×C_in×Ho×Wo×kh×kw
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))
    out = np.einsum("ncyxij,ocij->noyx", win, wd, optimize=True)

    def fn(g):
        g4 = g[None] if single else g
        dw = np.einsum("noyx,ncyxij->ocij", g4, win, optimize=True)
        dx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + ho, j:j + wo] += np.einsum("noyx,oc->ncyx", g4, wd[:, :, i, j], optimize=True)
        return (dx[0] if single else dx, dw)

    return _result("conv2d", out[0] if single else out, (x, w), fn)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes: ``C×H×W -> C``."""
    x = as_tensor(x)
    if x.data.ndim < 3:
        raise ValueError(f"global_avg_pool expects C×H×W (or N×C×H×W), got {x.shape}")
    shape = x.shape
    hw = shape[-1] * shape[-2]
    return _result("gap", x.data.mean(axis=(-2, -1)), (x,),
                   lambda g: (np.broadcast_to(g[..., None, None] / hw, shape).copy(),))


# probabilistic -----------------------------------------------------------


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")


def log_softmax(logits, T: float = 1.0) -> Tensor:
    """``log softmax(z/T)`` along the last axis."""
    _check_temperature(T)
    z = as_tensor(logits)
    s = z.data / T
    s = s - s.max(axis=-1, keepdims=True)
    out = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _result("log_softmax", out, (z,),
                   lambda g: ((g - p * g.sum(axis=-1, keepdims=True)) / T,))


def softmax_t(logits, T: float = 1.0) -> Tensor:
    """Softened softmax ``exp(z/T) / sum exp(z/T)`` along the last axis."""
    _check_temperature(T)
    z = as_tensor(logits)
    s = z.data / T
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _result("softmax", p, (z,),
                   lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)) / T,))


def cross_entropy(logits, labels, weights=None) -> Tensor:
    """Negative log-likelihood of integer ``labels``.

    A single ``K`` vector with an int label gives a scalar.  For an ``N×K``
    batch the per-sample losses are averaged, or combined as
    ``sum(weights * loss)`` when ``weights`` is given.
    """
    z = as_tensor(logits)
    k = z.shape[-1]
    lab = np.asarray(labels, dtype=np.int64)
    if np.any(lab < 0) or np.any(lab >= k):
        raise IndexError(f"label out of range [0, {k})")
    single = z.data.ndim == 1
    zd = z.data[None] if single else z.data
    lab = lab.reshape(-1)
    if lab.shape[0] != zd.shape[0]:
        raise ValueError("one label per row required")
    n = zd.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    s = zd - zd.max(axis=-1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    value = -np.sum(w * logp[rows, lab])

    def fn(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        d *= w[:, None] * g
        return (d[0] if single else d,)

    return _result("cross_entropy", np.asarray(value), (z,), fn)


def kl_div(p, q, atol: float = 1e-9, floor: float = 1e-12) -> Tensor:
    """``sum p * ln(p / q)`` along the last axis, with ``0 ln 0 = 0``.

    ``q`` is clamped at ``floor`` before the log.  Rows must be probability
    vectors to within ``atol``.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    for name, v in (("p", p.data), ("q", q.data)):
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=-1) - 1.0) > atol):
            raise ValueError(f"kl_div: {name} is not a probability vector")
    pd = p.data
    qd = np.maximum(q.data, floor)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    logq = np.log(qd)
    value = np.sum(np.where(pos, pd * (logp - logq), 0.0), axis=-1)
    clamped = q.data < floor

    def fn(g):
        g = np.expand_dims(g, -1)
        dp = np.where(pos, logp - logq + 1.0, 0.0) * g
        dq = np.where(clamped, 0.0, -pd / qd) * g
        return (dp, dq)

    return _result("kl_div", value, (p, q), fn)


def grl(x, lam: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lam`` times the gradient backward."""
    if lam < 0:
        raise ValueError(f"GRL weight must be non-negative, got {lam}")
    x = as_tensor(x)
    return _result("grl", x.data, (x,), lambda g: (-lam * g,))
