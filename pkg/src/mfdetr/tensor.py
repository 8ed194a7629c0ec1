"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the mask head needs are provided. Every op records a
closure mapping the output gradient to one gradient per parent; ``backward``
walks the recorded graph once in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from . import kernels
from .errors import (
    InvalidAxis,
    InvalidGroups,
    InvalidSize,
    InvalidStride,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Build the result of an op; the tape entry is kept only if a parent needs grad."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -------------------------------------------------------
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
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- autodiff driver ------------------------------------------------------

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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The recorded graph is consumed: calling backward again on the same loss
    (or any graph sharing consumed nodes) raises :class:`TapeConsumed`.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumed("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise TapeConsumed("loss has no recorded tape (nothing requires grad)")
    order = _topo_order(loss)
    for node in order:
        if node._consumed:
            raise TapeConsumed("graph shares nodes with an already-consumed tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor.from_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def _check_axis(axis: int, ndim: int) -> int:
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise InvalidAxis(f"axis {axis!r} invalid for rank {ndim}")
    return int(axis) % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), bw)


def activation(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


def bce_with_logits(z: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits; ``target`` is a constant."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    zd = z.data
    out = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    return Tensor.from_op(out, (z,), lambda g: (g * (expit(zd) - t),))


# -- shape manipulation ---------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    basic = _is_basic(index)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(x.data[index], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = _check_axis(axis, xs[0].ndim)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def pad(x: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = [(int(a), int(b)) for a, b in widths]
    if any(a < 0 or b < 0 for a, b in widths):
        raise InvalidSize(f"negative padding {widths}")
    sl = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return Tensor.from_op(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


def roll(x: Tensor, shift, axis) -> Tensor:
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return Tensor.from_op(np.roll(x.data, shift, axis=axis), (x,),
                          lambda g: (np.roll(g, neg, axis=axis),))


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_i x[..., i] w[i, j] + b[j]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"affine: x {x.shape} vs w {w.shape}")
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[1]):
        raise ShapeMismatch(f"affine: bias {b.shape} vs w {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, bw)


# -- normalisation ------------------------------------------------------------

def _norm_backward(g_hat, xhat, inv, n):
    s1 = g_hat.sum(axis=-1, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=-1, keepdims=True)
    return inv / n * (n * g_hat - s1 - xhat * s2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = _norm_backward(g * gamma.data, xhat, inv, d) if x.requires_grad else None
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return Tensor.from_op(out, (x, gamma, beta), bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 3:
        raise ShapeMismatch(f"group_norm expects (C, H, W), got {x.shape}")
    C, H, W = x.shape
    if groups < 1 or C % groups:
        raise InvalidGroups(f"{C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch("group_norm: affine parameters must have shape (C,)")
    xg = x.data.reshape(groups, -1)
    n = xg.shape[1]
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = (xc * inv).reshape(C, H, W)
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = (g * gamma.data[:, None, None]).reshape(groups, -1)
            gx = _norm_backward(gh, xhat.reshape(groups, -1), inv, n).reshape(C, H, W)
        return gx, (g * xhat).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return Tensor.from_op(out, (x, gamma, beta), bw)


# -- convolution ----------------------------------------------------------------

def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           depthwise: bool = False) -> Tensor:
    """Cross-correlation of x (Cin,H,W) with k (Cout,Cin,kh,kw), zero padded.

    With ``depthwise`` the kernel is (C,1,kh,kw) and each channel is filtered
    on its own.
    """
    if stride < 1:
        raise InvalidStride(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise InvalidSize(f"padding must be >= 0, got {pad}")
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (C,H,W) and (Cout,Cin,kh,kw), got {x.shape}, {k.shape}")
    cin = x.shape[0]
    cout, kin, kh, kw = k.shape
    if depthwise:
        if kin != 1 or cout != cin:
            raise ShapeMismatch(f"depthwise kernel {k.shape} incompatible with {cin} channels")
    elif kin != cin:
        raise ShapeMismatch(f"kernel expects {kin} input channels, got {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"bias {bias.shape} vs {cout} output channels")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeMismatch("kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    if depthwise:
        out = np.einsum("ckl,chwkl->chw", k.data[:, 0], win, optimize=True)
    else:
        out = np.tensordot(k.data, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bw(g):
        gx = gk = gb = None
        if k.requires_grad:
            if depthwise:
                gk = np.einsum("chw,chwkl->ckl", g, win, optimize=True)[:, None]
            else:
                gk = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        if x.requires_grad:
            if depthwise:
                gwin = k.data[:, 0, :, :, None, None] * g[:, None, None]
            else:
                gwin = np.tensordot(k.data, g, axes=([0], [0]))  # (Cin,kh,kw,ho,wo)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += gwin[:, a, b]
            gx = gxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, k, bias) if bias is not None else (x, k)
    return Tensor.from_op(out, parents, bw)


# -- bilinear sampling --------------------------------------------------------------

def sample(value: Tensor, pts: Tensor) -> Tensor:
    """Grouped bilinear read: value (G,H,W,C), pts (G,P,2) as (x,y) -> (G,P,C)."""
    value, pts = as_tensor(value), as_tensor(pts)
    if value.ndim != 4 or pts.ndim != 3 or pts.shape[-1] != 2 or pts.shape[0] != value.shape[0]:
        raise ShapeMismatch(f"sample: value {value.shape}, pts {pts.shape}")
    out = kernels.gather(value.data, pts.data)

    def bw(g):
        gv, gp = kernels.scatter(value.data, pts.data, g, pts.requires_grad)
        return (gv if value.requires_grad else None), (gp if pts.requires_grad else None)

    return Tensor.from_op(out, (value, pts), bw)


def bilinear_sample(f: Tensor, pts) -> Tensor:
    """Read f (C,H,W) at continuous points (P,2) -> (P,C).

    Pixel i covers [i, i+1) so its centre is i+0.5; neighbours outside the
    map contribute zero.
    """
    f, pts = as_tensor(f), as_tensor(pts)
    if f.ndim != 3 or pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeMismatch(f"bilinear_sample: f {f.shape}, pts {pts.shape}")
    C, H, W = f.shape
    value = reshape(transpose(f, (1, 2, 0)), (1, H, W, C))
    out = sample(value, reshape(pts, (1,) + pts.shape))
    return reshape(out, (pts.shape[0], C))


def clamp_to_centres(pts: np.ndarray, h: int, w: int) -> np.ndarray:
    """Clamp (x,y) points into the hull of pixel centres (border replicate)."""
    out = np.array(pts, dtype=np.float64, copy=True)
    out[..., 0] = np.clip(out[..., 0], 0.5, w - 0.5)
    out[..., 1] = np.clip(out[..., 1], 0.5, h - 0.5)
    return out


def resize_grid(in_h: int, in_w: int, out_h: int, out_w: int) -> np.ndarray:
    """Source (x,y) of every output pixel centre, half-pixel aligned, clamped."""
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h)
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    return clamp_to_centres(pts, in_h, in_w)


def interpolate_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of x (C,H,W) to (C,out_h,out_w)."""
    if int(out_h) < 1 or int(out_w) < 1:
        raise InvalidSize(f"output size must be >= 1, got {out_h}x{out_w}")
    C, H, W = x.shape
    if (out_h, out_w) == (H, W):
        return x
    pts = resize_grid(H, W, out_h, out_w)
    rows = bilinear_sample(x, pts)  # (out_h*out_w, C)
    return reshape(transpose(rows, (1, 0)), (C, out_h, out_w))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
