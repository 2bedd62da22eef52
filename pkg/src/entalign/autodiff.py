"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every learnable computation in the package runs through :class:`Tensor`.
Operations record their inputs and a local gradient rule on the output
tensor; :meth:`Tensor.backward` replays that record in reverse topological
order and accumulates gradients into leaves that require them.

Broadcasting is limited to leading axes: the shape of one operand must be a
suffix of the other's (``(B, n, d) + (d,)`` is fine, ``(n, 1) + (n, d)`` is
not).  Non-finite values raise :class:`NonFiniteError` as soon as an
operation produces them.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "ShapeError", "no_grad", "is_grad_enabled",
    "as_tensor", "elementwise", "add", "sub", "mul", "scale", "neg", "sigmoid", "log",
    "exp", "relu", "softplus", "matmul", "transpose", "swapaxes", "reshape", "softmax",
    "log_softmax", "reduce", "tsum", "mean", "max_with_argmax", "layer_norm", "take",
    "concat", "conv2d", "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``.

        The loss must hold exactly one value.  Gradients add onto whatever
        the leaves already hold, so two backward passes without zeroing in
        between sum their contributions.  The recorded graph is released
        afterwards.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        tape = Tape.record(self)
        if not tape.nodes:
            raise RuntimeError("nothing to differentiate: loss is not connected to any leaf requiring grad")
        tape.replay(self)
        tape.clear()


class Tape:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        if not root.requires_grad:
            return cls([])
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
        return cls(order)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def clear(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------------------
# helpers

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} differ beyond leading axes")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)
    return _result(ad * bd, (a, b), back, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def softplus(a) -> Tensor:
    """``log(1 + e^x)`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    return _result(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),), "softplus")


_UNARY = {"sigmoid": sigmoid, "log": log, "exp": exp, "relu": relu, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a float constant as ``b``."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "scale":
        return scale(a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.shape[-1] < 4:
        # OpenBLAS rounds narrow products differently depending on a row's
        # position; an explicit multiply-and-sum keeps rows independent.
        return np.sum(a[..., :, :, None] * b[..., None, :, :], axis=-2)
    return a @ b


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., m, k)`` and ``b`` of ``(k, n)`` or ``(..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return _result(_matmul_data(ad, bd), (a, b), back, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim))))
        return (out,)
    return _result(np.take(a.data, idx, axis=ax), (a,), back, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                   lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# reductions and normalizations

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,),
                   lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return _result(a.data.mean(axis=axes, keepdims=keepdims), (a,),
                   lambda g: (np.broadcast_to(g.reshape(kept), shape) / count,), "mean")


def max_with_argmax(a, axis: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Maximum and the index of its first occurrence.

    With ``axis=None`` the index is into the flattened tensor.  Ties go to the
    lowest index (``np.argmax`` semantics); the gradient flows only there.
    """
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("max over an empty axis")
    shape = a.shape
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))

        def back(g):
            out = np.zeros(flat.shape)
            out[idx] = g
            return (out.reshape(shape),)
        return _result(np.asarray(flat[idx]), (a,), back, "max"), np.asarray(idx)
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)
    return _result(vals, (a,), back, "max"), idx


def reduce(op_kind: str, a, axis=None):
    if op_kind == "sum":
        return tsum(a, axis)
    if op_kind == "mean":
        return mean(a, axis)
    if op_kind == "max":
        return max_with_argmax(a, axis)
    raise ValueError(f"unknown reduction {op_kind!r}")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return _result(y, (a,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``* gain + bias``."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)
    return _result(xhat * gd + bias.data, (a, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------------------
# convolution (channels-last, square kernels)

def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation via im2col.

    ``x``: (B, H, W, C); ``w``: (k, k, C, O); ``b``: (O,).  Output is
    (B, Ho, Wo, O) with ``Ho = (H + 2*padding - k) // stride + 1``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x (B,H,W,C) and w (k,k,C,O)")
    B, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {cin}")
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    cols = np.empty((B, Ho, Wo, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * Ho:s, j:j + s * Wo:s, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * C)
    w2 = w.data.reshape(kh * kw * C, cout)
    out = (cols2 @ w2 + b.data).reshape(B, Ho, Wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
        return gx, gw, gb
    return _result(out, (x, w, b), back, "conv2d")


# ---------------------------------------------------------------------------
# verification

def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
                      coords: Iterable[int] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``coords`` restricts the comparison to those flat indices of ``x``.
    Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    f(xt).backward()
    analytic = xt.grad.reshape(-1)
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.reshape(-1)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(Tensor(x0)).item()
            flat[i] = orig - eps
            down = f(Tensor(x0)).item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
