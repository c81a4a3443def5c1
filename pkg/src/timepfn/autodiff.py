"""A small dense-tensor engine with reverse-mode differentiation.

Only the operations the forecaster needs are provided. Every op computes its
result with numpy and, when any input requires a gradient, records its
inputs and a backward closure on the output. :meth:`Tensor.backward` orders
the recorded graph topologically from the loss and runs the closures in
reverse, after which the graph links are dropped.

Broadcasting follows numpy for elementwise ops; gradients are summed back to
each operand's shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import NotScalarLoss, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation --------------------------------------------------
    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g / b.data)
        if b.requires_grad:
            _accumulate(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _result(0.5 * x.data * (1.0 + t), (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# -- shape ops --------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(out, (x,), back)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def back(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), back)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        _accumulate(x, full)

    return _result(x.data[index], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeMismatch(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, splits, axis=ax)):
            _accumulate(t, part)

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def pad_edge(x: Tensor, right: int, axis: int = -1) -> Tensor:
    """Extend ``axis`` by repeating its last entry ``right`` times."""
    x = as_tensor(x)
    if right <= 0:
        return x
    ax = axis % x.ndim
    last = getitem(x, (slice(None),) * ax + (slice(-1, None),))
    reps = [1] * x.ndim
    reps[ax] = right
    return concat([x, tile(last, reps)], axis=ax)


def tile(x: Tensor, reps) -> Tensor:
    x = as_tensor(x)
    reps = tuple(reps)
    if len(reps) != x.ndim or any(r != 1 and s != 1 for r, s in zip(reps, x.shape)):
        raise ShapeMismatch(f"tile only repeats singleton axes; got {reps} for shape {x.shape}")
    axes = tuple(i for i, r in enumerate(reps) if r != 1)

    def back(g):
        _accumulate(x, g.sum(axis=axes, keepdims=True))

    return _result(np.tile(x.data, reps), (x,), back)


# -- reductions -------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        _accumulate(pred, g * 2.0 * diff / n)
        _accumulate(target, -g * 2.0 * diff / n)

    return _result(np.mean(diff * diff), (pred, target), back)


# -- linear algebra and layers ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch axes into one GEMM for the weight gradient
                ga = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def _same_pad(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero "same" padding.

    ``x`` is ``(B, C_in, L)``, ``weight`` is ``(C_out, C_in, k)``; the output
    is ``(B, C_out, L)``. For odd ``k`` the kernel is centred, so ``[0, 1, 0]``
    is the identity and ``[1, 0, 0]`` shifts the signal right by one.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    B, c_in, L = x.shape
    c_out, _, k = weight.shape
    left, right = _same_pad(k)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C_in, L, k)
    out = np.tensordot(cols, weight.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"conv1d: bias {bias.shape} does not match {c_out} outputs")
        out = out + bias.data[:, None]
        parents.append(bias)

    def back(g):
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(g, cols, axes=([0, 2], [0, 2])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, L, C_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + L] += gcols[:, :, :, j].transpose(0, 2, 1)
            _accumulate(x, gxp[:, :, left:left + L])

    return _result(np.ascontiguousarray(out), parents, back)


def magnitude_maxpool1d(x: Tensor, window: int = 3, stride: int = 1) -> Tensor:
    """Pool along the last axis keeping, per window, the entry of largest magnitude.

    The selected entry keeps its sign. Padding is "same" (as for
    :func:`conv1d`) and padded slots are never selected. Ties go to the
    earliest index, and the backward pass routes each output's gradient to
    its selected input only.
    """
    x = as_tensor(x)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    L = x.shape[-1]
    lead = x.shape[:-1]
    left, right = _same_pad(window)
    flat = x.data.reshape(-1, L)
    mags = np.pad(np.abs(flat), ((0, 0), (left, right)), constant_values=-np.inf)
    views = np.lib.stride_tricks.sliding_window_view(mags, window, axis=1)[:, ::stride]
    pick = np.argmax(views, axis=-1)  # (M, L_out)
    starts = np.arange(0, views.shape[1] * stride, stride)
    pos = starts[None, :] + pick - left
    rows = np.arange(flat.shape[0])[:, None]
    out = flat[rows, pos].reshape(*lead, -1)

    def back(g):
        full = np.zeros_like(flat)
        np.add.at(full, (np.broadcast_to(rows, pos.shape), pos), g.reshape(pos.shape))
        _accumulate(x, full.reshape(x.shape))

    return _result(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    x = as_tensor(x)
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeMismatch(f"layer_norm parameter {p.shape} does not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        if gamma is not None and gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta is not None and beta.requires_grad:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data if gamma is not None else g
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _result(out, parents, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), back)


# -- backward pass ----------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``.

    Gradients accumulate into existing ``.grad`` values on leaves, so callers
    clear them between steps. The recorded graph is released afterwards.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
