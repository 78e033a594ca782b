"""Dense float64 tensors with reverse-mode gradients.

Every learned component in the package (graph encoder, backbone, adapters)
is built from the handful of ops defined here. Values live in numpy arrays;
the computation graph is recorded dynamically while ``grad_enabled()`` is on
and at least one input requires a gradient.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


class Parameter(Tensor):
    """A named leaf tensor that always requires a gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"cannot divide shapes {a.shape} and {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * data / b.data, b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    x2 = x * x
    inner = c * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


# reductions and shape ops ---------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(data, tensors, backward)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    axis = axis % a.ndim
    sl = (slice(None),) * axis + (slice(start, stop),)
    out = a.data[sl]

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _make(out, (a,), backward)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather along the second-to-last axis (rows); ``index`` may be any int array.

    For a 2-D table this is an embedding lookup. For a batched ``[B, L, d]``
    input, ``index`` must be ``[B, M]`` and rows are gathered per batch entry.
    """
    index = np.asarray(index, dtype=np.int64)
    if a.ndim == 2:
        if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
            raise IndexError(f"row index out of range for table with {a.shape[0]} rows")
        out = a.data[index]

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index.reshape(-1), g.reshape(-1, a.shape[-1]))
            return (full,)

        return _make(out, (a,), backward)
    if a.ndim == 3 and index.ndim == 2 and index.shape[0] == a.shape[0]:
        b = np.arange(a.shape[0])[:, None]
        out = a.data[b, index]

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (np.broadcast_to(b, index.shape), index), g)
            return (full,)

        return _make(out, (a,), backward)
    raise DimensionError(f"take_rows: unsupported shapes {a.shape} / {index.shape}")


embedding = take_rows


def pick(a: Tensor, index) -> Tensor:
    """Select one entry per row along the last axis: ``out[i] = a[i, index[i]]``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _make(out, (a,), backward)


def put_rows(a: Tensor, rows, values: Tensor) -> Tensor:
    """Return a copy of 2-D ``a`` with ``rows`` replaced by ``values`` (rows must be unique)."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(np.unique(rows)) != len(rows):
        raise ValueError("put_rows needs unique row indices")
    out = a.data.copy()
    out[rows] = values.data

    def backward(g):
        ga = g.copy()
        ga[rows] = 0.0
        return ga, g[rows]

    return _make(out, (a, values), backward)


def segment_mean(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Mean of ``values`` rows grouped by ``segment_ids``; empty segments give zeros."""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(segment_ids, minlength=num_segments).astype(DTYPE)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    out = np.zeros((num_segments,) + values.shape[1:], dtype=DTYPE)
    np.add.at(out, segment_ids, values.data)
    out *= inv.reshape((-1,) + (1,) * (values.ndim - 1))

    def backward(g):
        scale = inv[segment_ids].reshape((-1,) + (1,) * (values.ndim - 1))
        return (g[segment_ids] * scale,)

    return _make(out, (values,), backward)


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` for ``x`` of shape ``[*, d_in]`` and ``weight`` ``[d_in, d_out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    y = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
        y = add(y, bias)
    return y


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gx_hat = g * gamma.data
        gx = rstd / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(0)
        gbeta = g.reshape(-1, d).sum(0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    ``mask`` is a boolean array broadcastable to ``[..., n_q, n_k]``; False
    entries are excluded from the softmax. Every query row must keep at least
    one key.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: query dim {q.shape} and key dim {k.shape} differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(f"attention: mask shape {mask.shape} does not match scores {scores.shape}")
        scores = add(scores, np.where(mask, 0.0, -1e30))
    return matmul(softmax(scores, axis=-1), v)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of integer ``targets`` under row-wise ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    return neg(sum_(pick(log_softmax(logits, axis=-1), targets)))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# verification ---------------------------------------------------------------

def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    tolerance: float | None = None,
) -> float:
    """Compare reverse-mode gradients against central differences.

    Args:
        fn: zero-argument callable that rebuilds the scalar output from the
            current parameter values.
        params: tensors (requires_grad) whose entries are perturbed in place.
        eps: finite-difference step, in [1e-6, 1e-3].
        tolerance: if given, raise AssertionError when the error exceeds it.

    Returns:
        max over all entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("function value is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NumericalError("analytic gradient is not finite")
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.shape, dtype=DTYPE)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        if not np.all(np.isfinite(numeric)):
            raise NumericalError("numeric gradient is not finite")
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0)
    if tolerance is not None and worst > tolerance:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}")
    return worst
