"""Minimal dense tensor with define-by-run reverse-mode differentiation.

Every operation that touches a ``requires_grad`` tensor records a node holding
its parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the recorded graph once and then releases it.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ValueError):
    """Input lies outside an operation's numeric domain (e.g. log of <= 0)."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation graph."""


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
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
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- graph recording -------------------------------------------------
    @classmethod
    def record(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap ``data`` as the output of an operation on ``parents``.

        ``backward(g)`` must return one gradient (or None) per parent, each
        already shaped like that parent.
        """
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.name = None
        out._consumed = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward --------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor.

        The graph is released afterwards; a second call on the same root raises.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward() call")
        if not self.requires_grad:
            raise GraphError("root does not require grad; nothing is connected to it")

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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node is not self:
                node._parents = ()
                node._backward = None
        self._parents = ()
        self._backward = None
        self._consumed = True

    # -- operator sugar --------------------------------------------------
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
        return apply_unary(self, "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return apply_unary(self, "relu")

    def sigmoid(self):
        return apply_unary(self, "sigmoid")

    def tanh(self):
        return apply_unary(self, "tanh")

    def exp(self):
        return apply_unary(self, "exp")

    def log(self):
        return apply_unary(self, "log")

    def square(self):
        return apply_unary(self, "square")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# -- elementwise binary ops ----------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor.record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


# -- unary ops -----------------------------------------------------------
def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


UNARY_FUNCTIONS = ("sigmoid", "tanh", "relu", "exp", "log", "neg", "square", "sqrt", "abs")


def apply_unary(x: Tensor, fn: str) -> Tensor:
    """Elementwise ``fn`` with its registered derivative.

    relu uses subgradient 0 at exactly 0.
    """
    x = as_tensor(x)
    d = x.data
    if fn == "sigmoid":
        out = _sigmoid(d)
        return Tensor.record(out, (x,), lambda g: (g * out * (1.0 - out),))
    if fn == "tanh":
        out = np.tanh(d)
        return Tensor.record(out, (x,), lambda g: (g * (1.0 - out * out),))
    if fn == "relu":
        pos = d > 0
        return Tensor.record(np.where(pos, d, 0.0), (x,), lambda g: (g * pos,))
    if fn == "exp":
        out = np.exp(d)
        return Tensor.record(out, (x,), lambda g: (g * out,))
    if fn == "log":
        if np.any(d <= 0):
            raise NumericDomainError("log requires strictly positive inputs")
        return Tensor.record(np.log(d), (x,), lambda g: (g / d,))
    if fn == "neg":
        return Tensor.record(-d, (x,), lambda g: (-g,))
    if fn == "square":
        return Tensor.record(d * d, (x,), lambda g: (2.0 * g * d,))
    if fn == "sqrt":
        if np.any(d < 0):
            raise NumericDomainError("sqrt requires non-negative inputs")
        out = np.sqrt(d)
        return Tensor.record(out, (x,), lambda g: (g / (2.0 * out),))
    if fn == "abs":
        return Tensor.record(np.abs(d), (x,), lambda g: (g * np.sign(d),))
    raise ValueError(f"unknown unary function {fn!r}; expected one of {UNARY_FUNCTIONS}")


def relu(x):
    return apply_unary(x, "relu")


def sigmoid(x):
    return apply_unary(x, "sigmoid")


def tanh(x):
    return apply_unary(x, "tanh")


def log(x):
    return apply_unary(x, "log")


def exp(x):
    return apply_unary(x, "exp")


def square(x):
    return apply_unary(x, "square")


# -- reductions and shape ops --------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.record(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor.record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.record(np.array(x.data[index]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor.record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return Tensor.record(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def pad_axis(x: Tensor, before: int, after: int, axis: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return Tensor.record(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


# -- linear algebra ------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor.record(out, (a, b), backward)


# -- fused normalisation ops ---------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: last dim {n} vs gamma {gamma.shape}, beta {beta.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return Tensor.record(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.record(out, (x,), backward)


# -- 1-D convolution -----------------------------------------------------
def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def transposed_output_length(length: int, kernel: int, stride: int, padding: int,
                             output_padding: int = 0) -> int:
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Strided cross-correlation: x[B,Cin,T] * kernel[Cout,Cin,k] -> [B,Cout,T']."""
    if x.ndim != 3 or kernel.ndim != 3 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    bsz, cin, length = x.shape
    k = kernel.shape[2]
    if length + 2 * padding < k:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {length + 2 * padding}")
    t_out = conv_output_length(length, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    idx = stride * np.arange(t_out)[:, None] + np.arange(k)[None, :]
    cols = xp[:, :, idx]  # B, Cin, T', k
    w = kernel.data
    out = np.einsum("bctk,ock->bot", cols, w, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gw = np.einsum("bot,bctk->ock", g, cols, optimize=True)
        gcols = np.einsum("bot,ock->bctk", g, w, optimize=True)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (slice(None), slice(None), idx), gcols)
        gx = gxp[:, :, padding:padding + length]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return Tensor.record(out, parents, backward)


def transposed_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                      padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d`: x[B,Cin,T'] with kernel[Cin,Cout,k] -> [B,Cout,T]."""
    if x.ndim != 3 or kernel.ndim != 3 or x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"transposed_conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    if output_padding < 0 or output_padding >= max(stride, 1):
        raise ValueError(f"output_padding {output_padding} must be smaller than stride {stride}")
    bsz, cin, t_in = x.shape
    k = kernel.shape[2]
    t_out = transposed_output_length(t_in, k, stride, padding, output_padding)
    if t_out <= 0:
        raise ValueError(f"transposed_conv1d: unreachable output length {t_out}")
    full_len = (t_in - 1) * stride + k + output_padding
    idx = stride * np.arange(t_in)[:, None] + np.arange(k)[None, :]
    w = kernel.data
    contrib = np.einsum("bct,cok->botk", x.data, w, optimize=True)
    full = np.zeros((bsz, w.shape[1], full_len))
    np.add.at(full, (slice(None), slice(None), idx), contrib)
    out = full[:, :, padding:padding + t_out]
    if bias is not None:
        out = out + bias.data[None, :, None]
    xd = x.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gfull = np.zeros((bsz, w.shape[1], full_len))
        gfull[:, :, padding:padding + t_out] = g
        gcontrib = gfull[:, :, idx]  # B, Cout, T', k
        gx = np.einsum("botk,cok->bct", gcontrib, w, optimize=True)
        gw = np.einsum("bct,botk->cok", xd, gcontrib, optimize=True)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return Tensor.record(np.ascontiguousarray(out), parents, backward)


# -- gradient checking ---------------------------------------------------
def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors; ``f(*x)`` must return a scalar.
    Perturbation is done in place on ``x[i].data``, so ``f`` may also close over
    the same tensors.  ``max_coords`` subsamples coordinates per tensor.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*xs).data)
            flat[i] = orig - eps
            fm = float(f(*xs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / denom)
    for t, flag in zip(xs, flags):
        t.grad = None
        t.requires_grad = flag
    return worst
