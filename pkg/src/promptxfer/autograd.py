"""Reverse-mode automatic differentiation over dense numpy arrays.

Leaf tensors are created at the process-wide default dtype: float32 for
normal runs, float64 inside ``precision("float64")`` for gradient
verification.  Graphs are plain closures over numpy arrays; a graph must be
driven by a single thread, independent graphs may run in parallel.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

_DEFAULT_DTYPE = np.dtype(np.float32)
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ValueError(f"default dtype must be float32 or float64, got {dt}")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. ``precision("float64")``)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


class Tensor:
    """Dense real tensor with an optional gradient of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _new(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            if not (g.flags.owndata and g.flags.writeable):
                g = g.copy()
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() is defined for scalar outputs only")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._acc(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Operator sugar; all routing goes through the module-level ops.
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

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _new(data: np.ndarray) -> Tensor:
    t = object.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._backward = None
    t._parents = ()
    return t


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph(out: Tensor, parents: Iterable[Tensor], backward: Callable[[], None]) -> None:
    live = tuple(p for p in parents if p.requires_grad or p._parents)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _new(a.data + b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.data.shape))

    _graph(out, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _new(a.data - b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-g, b.data.shape))

    _graph(out, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _new(a.data * b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.data, b.data.shape))

    _graph(out, (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _new(a.data / b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            a._acc(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    _graph(out, (a, b), bw)
    return out


def power(a, k: float) -> Tensor:
    a = _lift(a)
    k = float(k)
    out = _new(a.data**k)

    def bw():
        a._acc(out.grad * (k * a.data ** (k - 1)))

    _graph(out, (a,), bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with at least 2 dimensions")
    out = _new(a.data @ b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            a._acc(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    _graph(out, (a, b), bw)
    return out


def exp(a) -> Tensor:
    a = _lift(a)
    out = _new(np.exp(a.data))

    def bw():
        a._acc(out.grad * out.data)

    _graph(out, (a,), bw)
    return out


def log(a) -> Tensor:
    a = _lift(a)
    out = _new(np.log(a.data))

    def bw():
        a._acc(out.grad / a.data)

    _graph(out, (a,), bw)
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    out = _new(np.tanh(a.data))

    def bw():
        a._acc(out.grad * (1.0 - out.data * out.data))

    _graph(out, (a,), bw)
    return out


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    a = _lift(a)
    cdf = 0.5 * (1.0 + _special.erf(a.data * _INV_SQRT2))
    out = _new(a.data * cdf)

    def bw():
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        a._acc(out.grad * (cdf + a.data * pdf))

    _graph(out, (a,), bw)
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = _new(np.sum(a.data, axis=axis, keepdims=keepdims))

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.data.shape))

    _graph(out, (a,), bw)
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = _new(np.mean(a.data, axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.data.shape) / count)

    _graph(out, (a,), bw)
    return out


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = _new(a.data.reshape(shape))

    def bw():
        a._acc(out.grad.reshape(a.data.shape))

    _graph(out, (a,), bw)
    return out


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    out = _new(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def bw():
        a._acc(np.transpose(out.grad, inv))

    _graph(out, (a,), bw)
    return out


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    out = _new(np.broadcast_to(a.data, shape))

    def bw():
        a._acc(_unbroadcast(out.grad, a.data.shape))

    _graph(out, (a,), bw)
    return out


def take(a, indices, axis: int = 0) -> Tensor:
    """Index-select along an axis; duplicate indices accumulate in backward."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = _new(np.take(a.data, idx, axis=axis))

    def bw():
        buf = np.zeros_like(a.data)
        np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(out.grad, axis, 0))
        a._acc(buf)

    _graph(out, (a,), bw)
    return out


def take_along_last(a, indices) -> Tensor:
    """out[...] = a[..., indices[...]]; one index per leading position."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError("index shape must match the tensor shape minus the last axis")
    out = _new(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])

    def bw():
        buf = np.zeros_like(a.data)
        flat = buf.reshape(-1, a.data.shape[-1])
        flat[np.arange(flat.shape[0]), idx.reshape(-1)] += out.grad.reshape(-1)
        a._acc(buf)

    _graph(out, (a,), bw)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _lift(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = _new(a.data[sl])

    def bw():
        buf = np.zeros_like(a.data)
        buf[sl] = out.grad
        a._acc(buf)

    _graph(out, (a,), bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = _new(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]

    def bw():
        offset = 0
        for t, size in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + size)
                t._acc(out.grad[tuple(sl)])
            offset += size

    _graph(out, ts, bw)
    return out


def _np_log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    out = _new(_np_log_softmax(a.data, axis=axis))

    def bw():
        g = out.grad
        a._acc(g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    _graph(out, (a,), bw)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    out = _new(lse if keepdims else np.squeeze(lse, axis=axis))

    def bw():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis)
            ref = lse
        else:
            ref = out.data
        a._acc(g * np.exp(a.data - ref))

    _graph(out, (a,), bw)
    return out


def _check_finite_vector(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def kl_divergence(reference_logits, adjustable_logits) -> Tensor:
    """KL(softmax(reference) || softmax(adjustable)) in nats.

    The reference side is treated as a constant; gradient flows into the
    adjustable logits only.
    """
    adj = _lift(adjustable_logits)
    # the reference follows the adjustable side's dtype so that identical
    # inputs produce an exact zero
    ref = reference_logits.data if isinstance(reference_logits, Tensor) else np.asarray(reference_logits)
    ref = np.asarray(ref, dtype=adj.data.dtype)
    if ref.ndim != 1 or adj.ndim != 1:
        raise ValueError("kl_divergence expects 1-D logit vectors")
    if ref.shape != adj.shape:
        raise ValueError(f"logit length mismatch: {ref.shape} vs {adj.shape}")
    if ref.shape[0] < 2:
        raise ValueError("kl_divergence needs at least 2 logits")
    _check_finite_vector(ref, "reference logits")
    _check_finite_vector(adj.data, "adjustable logits")
    logp = _np_log_softmax(ref)
    p = np.exp(logp)
    logq = log_softmax(adj)
    return tsum(mul(_new(p), sub(_new(logp), logq)))


def cross_entropy(logits, target_index: int) -> Tensor:
    """-log softmax(logits)[target]; numerically stable; differentiable."""
    lt = _lift(logits)
    if lt.ndim != 1:
        raise ValueError("cross_entropy expects a 1-D logit vector")
    n = lt.shape[0]
    target_index = int(target_index)
    if not 0 <= target_index < n:
        raise ValueError(f"target index {target_index} out of range for {n} logits")
    return -take(log_softmax(lt), [target_index]).sum()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def flatten_grads(params: Sequence[Tensor]) -> np.ndarray:
    parts = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(np.asarray(g).ravel())
    return np.concatenate(parts)


def per_example_grads(
    loss_fn: Callable[[object], Tensor],
    examples: Sequence,
    params: Sequence[Tensor],
) -> list[np.ndarray]:
    """One flattened gradient vector over `params` per example."""
    if len(examples) == 0:
        raise ValueError("per_example_grads requires at least one example")
    grads = []
    for ex in examples:
        zero_grads(params)
        loss = loss_fn(ex)
        loss.backward()
        grads.append(flatten_grads(params))
    zero_grads(params)
    return grads


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    tolerance: float = 1e-6,
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[bool, float]:
    """Compare the autodiff gradient of f at x against central differences.

    Runs in float64; constants captured by `f` should be float64 too or the
    quantization noise of float32 will dominate the difference quotients.
    Returns (max relative error < tolerance, max relative error).  When
    `max_coords` is set only a random subset of coordinates is probed.
    """
    with precision(np.float64):
        base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        xt = Tensor(base.copy(), requires_grad=True)
        out = f(xt)
        if out.size != 1:
            raise ValueError("finite_diff_check expects a scalar-valued function")
        out.backward()
        g = (xt.grad if xt.grad is not None else np.zeros_like(base)).ravel()

        n = base.size
        if max_coords is None or max_coords >= n:
            coords = np.arange(n)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords, replace=False)

        max_rel = 0.0
        flat = base.ravel()
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(flat.reshape(base.shape))).item()
            flat[i] = orig - step
            lo = f(Tensor(flat.reshape(base.shape))).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            rel = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1.0)
            max_rel = max(max_rel, rel)
    return max_rel < tolerance, max_rel
