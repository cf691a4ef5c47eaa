"""Small reverse-mode autodiff core over float64 numpy arrays.

Only the operations the capsule network needs are provided. Every op
accepts an optional leading batch axis so a whole mini-batch runs through
one graph. A node records its parents and a closure that maps the output
gradient to one gradient per parent; ``Tensor.backward`` walks the graph
once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def backward(self) -> None:
        """Populate ``grad`` on every node that requires it.

        Leaf gradients accumulate across calls; call ``zero_grad`` on
        parameters between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result; ``backward(g)`` returns one gradient per parent."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    ez = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def pointwise(t, fn: str, other=None) -> Tensor:
    """Dispatch by name: sigmoid, relu, add, mul, scale."""
    if fn == "sigmoid":
        return sigmoid(t)
    if fn == "relu":
        return relu(t)
    if fn == "add":
        return add(t, other)
    if fn == "mul":
        return mul(t, other)
    if fn == "scale":
        return scale(t, float(other))
    raise ValueError(f"unknown pointwise fn {fn!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_op(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return make_op(a.data[key], (a,), back, "index")


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    out = np.stack([t.data for t in items], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return make_op(out, items, back, "stack")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), back, "softmax")


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient taken as 0 at the origin."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def back(g):
        nk = np.expand_dims(n, axis)
        unit = np.divide(a.data, nk, out=np.zeros_like(a.data), where=nk > 0)
        return (unit * np.expand_dims(g, axis),)

    return make_op(n, (a,), back, "norm")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return make_op(out, (a, b), back, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"nij,nje->nie"``.

    Every index of an operand must appear in the output or in the other
    operand; repeated indices within one operand are not supported.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)

    def back(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), back, "einsum")


# ---------------------------------------------------------------------------
# convolution family

def _batched(x: Tensor, spatial_ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == spatial_ndim:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == spatial_ndim + 1:
        return x, False
    raise DimensionError(f"expected {spatial_ndim} or {spatial_ndim + 1} dims, got shape {x.shape}")


def extract_windows(x, k: int, dilation: int = 1, stride: int = 1, pad: int = 0) -> Tensor:
    """Sliding k x k windows: [B, H, W, C] -> [B, Ho, Wo, k, k, C] (zero padded by ``pad``)."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    eff = (k - 1) * dilation + 1
    if eff > hp or eff > wp:
        raise DimensionError(f"window footprint {eff} exceeds padded input {hp}x{wp}")
    ho = (hp - eff) // stride + 1
    wo = (wp - eff) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _kernels.im2col(xp, k, dilation, stride, ho, wo)

    def back(g):
        full = _kernels.col2im(g, hp, wp, dilation, stride)
        if pad:
            full = full[:, pad:pad + h, pad:pad + w, :]
        return (full,)

    return make_op(cols, (x,), back, "windows")


def conv2d(x, kernel, stride: int = 1, dilation: int = 1, padding: str = "valid") -> Tensor:
    """Dilated 2-D cross-correlation.

    ``x`` is [H, W, Cin] or [B, H, W, Cin]; ``kernel`` is [k, k, Cin, Cout].
    ``same`` zero-pads so stride-1 output keeps the input size.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"kernel must be [k, k, cin, cout], got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if padding not in ("valid", "same"):
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    xb, squeeze = _batched(x, 3)
    if xb.shape[-1] != cin:
        raise DimensionError(f"input has {xb.shape[-1]} channels, kernel expects {cin}")
    pad = dilation * (k - 1) // 2 if padding == "same" else 0
    cols = extract_windows(xb, k, dilation, stride, pad)
    bsz, ho, wo = cols.shape[:3]
    flat = reshape(cols, (bsz * ho * wo, k * k * cin))
    out = matmul(flat, reshape(kernel, (k * k * cin, cout)))
    out = reshape(out, (bsz, ho, wo, cout))
    return reshape(out, out.shape[1:]) if squeeze else out


def conv1d_channels(v, kernel) -> Tensor:
    """Zero-padded k-tap correlation along the last (channel) axis."""
    v, kernel = as_tensor(v), as_tensor(kernel)
    if kernel.ndim != 1:
        raise DimensionError("channel kernel must be 1-D")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    half = (k - 1) // 2
    c = v.shape[-1]
    vp = np.pad(v.data, [(0, 0)] * (v.ndim - 1) + [(half, half)])
    taps = np.stack([vp[..., t:t + c] for t in range(k)], axis=-1)  # [..., c, k]
    out = taps @ kernel.data

    def back(g):
        gk = (taps.reshape(-1, k).T @ g.reshape(-1)) if kernel.requires_grad else None
        gv = None
        if v.requires_grad:
            gp = np.zeros_like(vp)
            for t in range(k):
                gp[..., t:t + c] += g * kernel.data[t]
            gv = gp[..., half:half + c]
        return gv, gk

    return make_op(out, (v, kernel), back, "conv1d")


def global_avg_pool(t) -> Tensor:
    """[.., H, W, C] -> [.., C] spatial mean."""
    t = as_tensor(t)
    if t.ndim < 3:
        raise DimensionError(f"expected [..., H, W, C], got {t.shape}")
    return mean(t, axis=(-3, -2))


def squash(s, axis: int = -1) -> Tensor:
    """Capsule nonlinearity: keeps direction, maps norm n to n^2 / (1 + n^2)."""
    s = as_tensor(s)
    moved = np.moveaxis(s.data, axis, -1)
    shp = moved.shape
    rows = moved.reshape(-1, shp[-1])
    out = np.moveaxis(_kernels.squash_rows(rows).reshape(shp), -1, axis)

    def back(g):
        gm = np.moveaxis(g, axis, -1).reshape(-1, shp[-1])
        gs = _kernels.squash_rows_grad(rows, gm).reshape(shp)
        return (np.moveaxis(gs, -1, axis),)

    return make_op(out, (s,), back, "squash")


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is |analytic - numeric| / max(1, |numeric|).
    ``coords`` restricts the check to a subset of flat indices (for large
    parameter tensors).
    """
    base = np.array(as_tensor(point).data, dtype=np.float64, copy=True)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    out.backward()
    analytic = np.zeros(base.size) if x.grad is None else x.grad.reshape(-1)
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    flat = base.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(Tensor(base.copy())).item()
        flat[i] = orig - eps
        fm = fn(Tensor(base.copy())).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
