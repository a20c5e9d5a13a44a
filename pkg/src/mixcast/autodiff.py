"""Reverse-mode automatic differentiation over a fixed operation set.

Tensors wrap float64 numpy arrays.  Ops executed while a Tape is active are
recorded as nodes; ``backward`` replays the tape once in reverse and deposits
gradients into every reachable leaf's ``grad`` buffer.  Ops executed without
an active tape compute forward values only, which keeps inference cheap.

A tape and the tensors it produced are confined to one thread; independent
tapes may run concurrently on other threads.
"""

from __future__ import annotations

import math
import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class InvalidValueError(ValueError):
    """Operand contains NaN where finite values are required."""


class GraphError(RuntimeError):
    """Structural misuse of the tape (bad loss, duplicate names, nesting)."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """Leaf tensor that never receives a gradient."""
    return Tensor(data, requires_grad=False)


_STATE = threading.local()


def _current_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of executed primitive ops plus a parameter registry.

    Node order is execution order, so every node's parents precede it and a
    single reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self.nodes = []  # (out Tensor, [(parent Tensor, vjp callable)])
        self.params: dict[str, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise GraphError("tapes do not nest")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def register(self, name: str, tensor: Tensor):
        """Register a named leaf so optimizer code can locate its gradient."""
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self.params[name] = tensor

    def watch(self, named_tensors):
        for name, tensor in named_tensors.items():
            self.register(name, tensor)


def _record(data: np.ndarray, pulls) -> Tensor:
    tape = _current_tape()
    needs = any(p.requires_grad for p, _ in pulls)
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.nodes.append((out, pulls))
        tape._produced.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls without ``zero_grad`` keep accumulating.
    """
    if not isinstance(loss, Tensor) or id(loss) not in tape._produced:
        raise GraphError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise GraphError("loss must be a scalar")
    flowing = {id(loss): np.ones_like(loss.data)}
    for out, pulls in reversed(tape.nodes):
        g = flowing.pop(id(out), None)
        if g is None:
            continue
        for parent, vjp in pulls:
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            if id(parent) in tape._produced:
                slot = flowing.get(id(parent))
                if slot is None:
                    # own the buffer: vjps may return views of upstream grads
                    flowing[id(parent)] = np.array(pg, dtype=np.float64)
                else:
                    slot += pg
            else:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    return _record(out, [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)])


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _record(x.data.T, [(x, lambda g: g.T)])


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _record(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _record(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, [(x, lambda g: g * c)])


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, [(x, lambda g: g * out)])


def absval(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _record(np.abs(x.data), [(x, lambda g: g * np.sign(x.data))])


def sum_all(x: Tensor) -> Tensor:
    out = np.sum(x.data)
    return _record(out, [(x, lambda g: np.full(x.data.shape, float(g)))])


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.mean(x.data)
    return _record(out, [(x, lambda g: np.full(x.data.shape, float(g) / n))])


def softmax_columns(x: Tensor) -> Tensor:
    """Column-wise softmax, shift-invariant via per-column max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError("softmax_columns expects a matrix")
    if np.isnan(x.data).any():
        raise InvalidValueError("softmax_columns received NaN input")
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        return s * (g - (s * g).sum(axis=0, keepdims=True))

    return _record(s, [(x, vjp)])


def elu(x: Tensor) -> Tensor:
    d = x.data
    out = np.where(d > 0.0, d, np.expm1(d))
    return _record(out, [(x, lambda g: g * np.where(d > 0.0, 1.0, np.exp(d)))])


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Width-3 convolution along the time axis with zero same-padding.

    x is (t, d), kernel is (3, d, d_out); output is (t, d_out).
    """
    if x.data.ndim != 2:
        raise ShapeError("conv1d input must be (t, d)")
    if kernel.data.ndim != 3 or kernel.data.shape[0] != 3 or kernel.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"conv1d kernel must be (3, {x.data.shape[1]}, d_out), got {kernel.data.shape}")
    t, d = x.data.shape
    d_out = kernel.data.shape[2]
    xpad = np.zeros((t + 2, d))
    xpad[1:t + 1] = x.data
    out = np.zeros((t, d_out))
    for w in range(3):
        out += xpad[w:w + t] @ kernel.data[w]

    def vjp_x(g):
        dpad = np.zeros_like(xpad)
        for w in range(3):
            dpad[w:w + t] += g @ kernel.data[w].T
        return dpad[1:t + 1]

    def vjp_k(g):
        dk = np.zeros_like(kernel.data)
        for w in range(3):
            dk[w] = xpad[w:w + t].T @ g
        return dk

    return _record(out, [(x, vjp_x), (kernel, vjp_k)])


def maxpool1d(x: Tensor) -> Tensor:
    """Per-channel max over windows of 2 with stride 2; an odd tail row passes
    through.  Backward routes the gradient to the argmax, ties to the lower
    index."""
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError("maxpool1d input must be (t, d) with t >= 1")
    d = x.data
    t = d.shape[0]
    pairs = t // 2
    a = d[0:2 * pairs:2]
    b = d[1:2 * pairs:2]
    first = a >= b
    top = np.where(first, a, b)
    odd = t % 2 == 1
    out = np.concatenate([top, d[t - 1:t]]) if odd else top

    def vjp(g):
        dx = np.zeros_like(d)
        gp = g[:pairs]
        dx[0:2 * pairs:2] = np.where(first, gp, 0.0)
        dx[1:2 * pairs:2] = np.where(first, 0.0, gp)
        if odd:
            dx[t - 1] += g[pairs]
        return dx

    return _record(out, [(x, vjp)])


def logsumexp(x: Tensor) -> Tensor:
    """log sum exp of a vector, computed as m + log(sum(exp(x - m)))."""
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError("logsumexp expects a nonempty vector")
    m = x.data.max()
    out = m + math.log(np.sum(np.exp(x.data - m)))
    weights = np.exp(x.data - out)
    return _record(np.float64(out), [(x, lambda g: float(g) * weights)])


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: mask ~ Bernoulli(1-p), output = x * mask / (1-p).

    Mask draws are consumed from ``rng``, so the result is a pure function of
    (input, generator state).  p = 0 is the identity and consumes no draws.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = rng.random(x.data.shape) >= p
    m = keep / (1.0 - p)
    return _record(x.data * m, [(x, lambda g: g * m)])


def stack(tensors) -> Tensor:
    """Stack scalar tensors into a vector."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack of no tensors")
    for t in tensors:
        if t.data.size != 1:
            raise ShapeError("stack expects scalar tensors")
    out = np.array([float(t.data) for t in tensors])
    pulls = [(t, (lambda g, i=i: np.asarray(g[i]))) for i, t in enumerate(tensors)]
    return _record(out, pulls)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors or any(t.data.ndim != 2 for t in tensors):
        raise ShapeError("concat_rows expects matrices")
    cols = tensors[0].data.shape[1]
    if any(t.data.shape[1] != cols for t in tensors):
        raise ShapeError("concat_rows column mismatch")
    out = np.concatenate([t.data for t in tensors], axis=0)
    pulls = []
    offset = 0
    for t in tensors:
        n = t.data.shape[0]
        pulls.append((t, (lambda g, o=offset, n=n: g[o:o + n])))
        offset += n
    return _record(out, pulls)


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors or any(t.data.ndim != 2 for t in tensors):
        raise ShapeError("concat_cols expects matrices")
    rows = tensors[0].data.shape[0]
    if any(t.data.shape[0] != rows for t in tensors):
        raise ShapeError("concat_cols row mismatch")
    out = np.concatenate([t.data for t in tensors], axis=1)
    pulls = []
    offset = 0
    for t in tensors:
        n = t.data.shape[1]
        pulls.append((t, (lambda g, o=offset, n=n: g[:, o:o + n])))
        offset += n
    return _record(out, pulls)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] of {x.data.shape}")

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return dx

    return _record(x.data[start:stop].copy(), [(x, vjp)])


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of {x.data.shape}")

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return dx

    return _record(x.data[:, start:stop].copy(), [(x, vjp)])


def reshape_vector(x: Tensor) -> Tensor:
    """Flatten a (t, 1) column to a (t,) vector."""
    if x.data.ndim != 2 or x.data.shape[1] != 1:
        raise ShapeError("reshape_vector expects a (t, 1) column")
    return _record(x.data[:, 0].copy(), [(x, lambda g: g.reshape(-1, 1))])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization: (x - mean) / sqrt(var + eps) * gamma + beta."""
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a matrix")
    n = x.data.shape[1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError("layer_norm gamma/beta must be (cols,)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp_x(g):
        gg = g * gamma.data
        return (gg - gg.mean(axis=1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=1, keepdims=True)) * inv

    return _record(out, [
        (x, vjp_x),
        (gamma, lambda g: (g * xhat).sum(axis=0)),
        (beta, lambda g: g.sum(axis=0)),
    ])
