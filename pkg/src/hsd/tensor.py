"""Small reverse-mode autodiff over numpy float64 arrays.

Only what the classifier and the unrolled SNN need: dense/conv/avg-pool
layers, a handful of elementwise ops, reductions and a hook for
user-supplied gradients (surrogate spikes, straight-through quantizers).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, teacher inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into every leaf with ``requires_grad``.

    Nodes are visited in reverse topological order, so each node's
    gradient is complete before it is propagated to its parents.
    """
    if not root.requires_grad:
        raise RuntimeError("backward: tensor does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise RuntimeError("backward: implicit gradient only for scalar outputs")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != root.shape:
        raise ValueError(f"backward: gradient shape {grad.shape} != tensor shape {root.shape}")

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

    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise / algebraic ops -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


# reductions / shape ----------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse every axis but the first."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:]))))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw)


# linear layers ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _im2col(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Columns of shape (C*k*k, B*H'*W') for a stride-1 correlation."""
    b, c, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if pad:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, b, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + ho, j:j + wo].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * ho * wo), ho, wo


def conv2d(x, weight, bias=None, padding: int | None = None) -> Tensor:
    """Stride-1 2D cross-correlation, NCHW input, (O, C, k, k) kernel.

    ``padding`` defaults to ``k // 2`` zero padding (same-size output for
    odd kernels).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] \
            or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    o, c, k, _ = weight.shape
    pad = k // 2 if padding is None else int(padding)
    bsz, _, h, w = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    cols, ho, wo = _im2col(x.data, k, pad)
    wmat = weight.data.reshape(o, c * k * k)
    out = wmat @ cols                                   # (O, B*H'*W')
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
        out += bias.data[:, None]
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(o, bsz, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, bsz * ho * wo)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # full correlation of the upstream grad with the flipped, channel-swapped kernel
            gcols, _, _ = _im2col(g, k, k - 1 - pad)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
            gx = np.ascontiguousarray((wflip @ gcols).reshape(c, bsz, h, w).transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    return _make(out, parents, bw)


def avgpool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ValueError(f"avgpool2d: input shape {x.shape} not divisible by kernel {(k, k)}")
    b, c, h, w = x.shape
    xd = x.data
    out = np.zeros((b, c, h // k, w // k))
    for i in range(k):
        for j in range(k):
            out += xd[:, :, i::k, j::k]
    out *= 1.0 / (k * k)

    def bw(g):
        full = np.empty((b, c, h // k, k, w // k, k))
        full[...] = (g * (1.0 / (k * k)))[:, :, :, None, :, None]
        return (full.reshape(b, c, h, w),)

    return _make(out, (x,), bw)


def dense(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias with weight stored (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"dense: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw)


def custom_gradient(forward_fn: Callable[..., np.ndarray],
                    backward_fn: Callable[..., Sequence[np.ndarray | None] | np.ndarray]):
    """Build a differentiable op from a forward and an unrelated backward.

    ``forward_fn(*arrays)`` computes the output.  ``backward_fn(upstream,
    *arrays)`` returns one gradient per input (or a single array for unary
    ops); it is used verbatim, never chained through ``forward_fn``.
    """

    def op(*inputs) -> Tensor:
        ts = [as_tensor(t) for t in inputs]
        arrays = [t.data for t in ts]
        out = np.asarray(forward_fn(*arrays), dtype=np.float64)

        def bw(g):
            res = backward_fn(g, *arrays)
            if isinstance(res, np.ndarray) or np.isscalar(res):
                res = (res,)
            res = list(res)
            for i, (r, t) in enumerate(zip(res, ts)):
                if r is not None:
                    r = np.asarray(r, dtype=np.float64)
                    if r.shape != t.shape:
                        r = _unbroadcast(np.broadcast_to(r, np.broadcast_shapes(r.shape, t.shape)), t.shape)
                    res[i] = r
            return res

        return _make(out, ts, bw)

    return op


def cross_entropy_from_probs(probs: Tensor, labels: np.ndarray, eps: float = 0.0) -> Tensor:
    """Mean over the batch of -log probs[label]."""
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    p = probs if eps <= 0 else clamp_min(probs, eps)
    return scale(sum(mul(log(p), onehot)), -1.0 / len(labels))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer labels."""
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return scale(sum(mul(log_softmax(logits, axis=-1), onehot)), -1.0 / len(labels))
