"""Dense tensors with reverse-mode automatic differentiation, backed by numpy.

Only what a small transformer needs is here: broadcasting arithmetic,
batched matmul, reductions, shape ops, softmax, layer norm, patch
convolution, embedding lookup and cross-entropy.  Every op records a closure
that maps the output gradient to input gradients; ``Tensor.backward`` walks
the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- bookkeeping -----------------------------------------------------
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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g
            if node._parents:
                # interior node: its gradient is no longer needed
                node.grad = None if node is not self else node.grad

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(a.data * pos, (a,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, so finite differences agree)."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), back)


# -- linear algebra ------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ _swap_last(bd), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap_last(ad) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), back)


# -- reductions ----------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return _result(
        np.asarray(out), (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,)
    )


# -- shape ops -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    # contiguous copies keep matmul on the BLAS path
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise UsageError("index with numpy arrays, not Tensors")
    shape, dtype = a.shape, a.dtype
    advanced = _has_advanced(index)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    out = a.data[index]
    if not advanced:
        out = np.ascontiguousarray(out)
    return _result(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# -- fused nn ops --------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    y = _result(xhat.astype(xd.dtype, copy=False), (x,), back)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id outside the embedding table")
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over all leading positions.

    ``logits`` is (..., V); ``targets`` has the leading shape.  A single
    logit vector with an integer target gives the plain per-token loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id outside vocabulary of size {vocab}")
    flat = logits.data.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    if flat.shape[0] != tflat.shape[0]:
        raise DimensionError("logits and targets disagree on the number of positions")
    count = tflat.shape[0]
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(count)
    nll = lse - shifted[rows, tflat]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def back(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, tflat] -= 1.0
        return ((probs * (g / count)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _result(loss, (logits,), back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int | None = None) -> Tensor:
    """Non-overlapping convolution with kernel == stride (patch embedding).

    ``x`` is (Cin, H, W) or (B, Cin, H, W); ``weight`` is (Cout, Cin, k, k).
    """
    cout, cin, kh, kw = weight.shape
    stride = kh if stride is None else stride
    if kh != kw or stride != kh:
        raise ConfigurationError("only square kernels with kernel == stride are supported")
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels, kernel expects {cin}")
    if h % stride or w % stride:
        raise ConfigurationError(f"spatial dims {h}x{w} not divisible by stride {stride}")
    gh, gw = h // stride, w // stride
    patches = reshape(x, (b, c, gh, stride, gw, stride))
    patches = transpose(patches, (0, 2, 4, 1, 3, 5))
    patches = reshape(patches, (b, gh * gw, c * stride * stride))
    kernel = transpose(reshape(weight, (cout, cin * kh * kw)), (1, 0))
    out = matmul(patches, kernel)
    if bias is not None:
        out = out + bias
    out = transpose(reshape(out, (b, gh, gw, cout)), (0, 3, 1, 2))
    if single:
        out = reshape(out, (cout, gh, gw))
    return out


# -- parameters ----------------------------------------------------------


class Parameters:
    """Named, shape-stable collection of trainable tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Current gradients; parameters the loss never reached get zeros."""
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self._tensors.items()
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._tensors):
            missing = set(self._tensors) - set(state)
            extra = set(state) - set(self._tensors)
            raise KeyError(f"parameter names differ (missing={sorted(missing)}, extra={sorted(extra)})")
        for n, t in self._tensors.items():
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise DimensionError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype) -> None:
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())


def backward(loss: Tensor, params: Parameters | None = None) -> dict[str, np.ndarray] | None:
    """Backpropagate ``loss``; with ``params`` given, return their gradients."""
    if params is not None:
        params.zero_grad()
    loss.backward()
    return params.grads() if params is not None else None


def sum_tensors(terms: Iterable[Tensor]) -> Tensor:
    """Left-to-right sum, so the float result depends only on the order given."""
    total = None
    for t in terms:
        total = t if total is None else total + t
    if total is None:
        return Tensor(np.zeros((), dtype=DEFAULT_DTYPE))
    return total
