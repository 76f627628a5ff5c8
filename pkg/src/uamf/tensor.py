"""Dense tensors with reverse-mode automatic differentiation (numpy backend).

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to one gradient per parent.  ``backward`` walks the
graph in reverse topological order and accumulates into leaf tensors that
have ``requires_grad`` set.  The graph is rebuilt on every forward pass and
tracked arrays are never mutated in place.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_branch_log: Optional[list] = None


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def record_branches():
    """Collect the branch masks chosen by piecewise ops (max, relu).

    Gradient checks use this to detect finite-difference probes that straddle
    a kink, where the central difference is meaningless.
    """
    global _branch_log
    previous = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


def _log_branch(mask: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask.ravel()))


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind == "f":
        return arr
    return arr.astype(_default_dtype)


class Tensor:
    """N-dimensional float array that can take part in autodiff."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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

    def backward(self, grad=None) -> None:
        backward(self, grad)


class Parameter(Tensor):
    """Trainable leaf tensor.  ``name`` is filled in by the owning module tree."""

    def __init__(self, data, name: str = "", no_decay: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or _default_dtype)
        self.name = name
        self.no_decay = no_decay

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape}, dtype={self.dtype})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")

    def back(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def back(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise UsageError("power() takes a constant exponent")
    exponent = float(exponent)

    def back(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(a.data ** exponent, (a,), back, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    _log_branch(pick_a)

    def back(g):
        return unbroadcast(np.where(pick_a, g, 0), a.shape), unbroadcast(np.where(pick_a, 0, g), b.shape)

    return _node(np.where(pick_a, a.data, b.data), (a, b), back, "maximum")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_branch(mask)
    return _node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _node(out, (a,), back, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(a.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- reductions and shape ops -----------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DimensionError(f"mean over empty axes of shape {a.shape}")
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, back, "concat")


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, batch axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias`` with weight (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def back(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return _node(out.astype(x.dtype), (x, gain, bias), back, "layer_norm")


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigError(f"expected an int or a triple, got {v}")
    return v


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1,
           padding=None, groups: int = 1) -> Tensor:
    """3D cross-correlation over (batch, channels, T, H, W).

    ``weight`` is (C_out, C_in // groups, kT, kH, kW).  Padding defaults to
    ``k // 2`` zeros per side, so odd kernels at stride 1 keep the extents
    and 1x1x1 kernels are unpadded.
    """
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects (B, C, T, H, W), got {x.shape}")
    B, c_in, T, H, W = x.shape
    c_out, c_group, kT, kH, kW = weight.shape
    if groups < 1 or c_in % groups or c_out % groups or c_group != c_in // groups:
        raise ConfigError(
            f"conv3d: {c_in} input channels, weight {weight.shape} and groups={groups} are inconsistent")
    strides = _triple(stride)
    pads = _triple(padding) if padding is not None else (kT // 2, kH // 2, kW // 2)
    if min(n + 2 * p - k for n, p, k in zip((T, H, W), pads, (kT, kH, kW))) < 0:
        raise ConfigError(f"conv3d: input {x.shape} too small for kernel {weight.shape[2:]}")
    kernel = _StridedConv if strides != (1, 1, 1) else _ShiftConv
    conv = kernel(x.data, weight.data.reshape(groups, c_out // groups, c_group, kT, kH, kW), strides, pads)
    out = conv.forward()
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1, 1)

    def back(g):
        gx, gw = conv.backward(np.ascontiguousarray(g))
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back, "conv3d")


class _ConvKernel:
    def __init__(self, x: np.ndarray, wg: np.ndarray, strides: tuple, pads: tuple):
        self.x, self.wg, self.strides, self.pads = x, wg, strides, pads
        self.G, self.o_group, self.c_group = wg.shape[:3]
        self.kernel = wg.shape[3:]
        self.depthwise = self.c_group == 1 and self.o_group == 1
        self.offsets = list(itertools.product(*(range(k) for k in self.kernel)))
        B, _, T, H, W = x.shape
        self.B = B
        self.padded = tuple(n + 2 * p for n, p in zip((T, H, W), pads))
        self.out_ext = tuple((n - k) // s + 1 for n, k, s in zip(self.padded, self.kernel, strides))
        if any(pads):
            pT, pH, pW = pads
            self.xp = np.pad(x, ((0, 0), (0, 0), (pT, pT), (pH, pH), (pW, pW)))
        else:
            self.xp = np.ascontiguousarray(x)

    def _unpad(self, gxp: np.ndarray) -> np.ndarray:
        (pT, pH, pW), (_, _, T, H, W) = self.pads, self.x.shape
        return gxp[:, :, pT:pT + T, pH:pH + H, pW:pW + W]


class _ShiftConv(_ConvKernel):
    """Stride 1: each kernel offset is one contiguous shift of the flattened padded volume."""

    def __init__(self, *args):
        super().__init__(*args)
        Tp, Hp, Wp = self.padded
        T1, H1, W1 = self.out_ext
        self.plane = Hp * Wp
        self.length = (T1 - 1) * self.plane + (H1 - 1) * Wp + W1
        self.shifts = [dt * self.plane + dh * Wp + dw for dt, dh, dw in self.offsets]
        self.pointwise = self.kernel == (1, 1, 1) and not any(self.pads)
        self.xf = self.xp.reshape(self.B, self.G, self.c_group, Tp * self.plane)

    def _crop(self, flat: np.ndarray) -> np.ndarray:
        c = flat.shape[1]
        Tp, Hp, Wp = self.padded
        T1, H1, W1 = self.out_ext
        grid = np.zeros((self.B, c, Tp * self.plane), dtype=flat.dtype)
        grid[:, :, :self.length] = flat
        return grid.reshape(self.B, c, Tp, Hp, Wp)[:, :, :T1, :H1, :W1]

    def _uncrop(self, g: np.ndarray) -> np.ndarray:
        Tp, Hp, Wp = self.padded
        T1, H1, W1 = self.out_ext
        grid = np.zeros((self.B, g.shape[1], Tp, Hp, Wp), dtype=g.dtype)
        grid[:, :, :T1, :H1, :W1] = g
        return grid.reshape(self.B, g.shape[1], -1)[:, :, :self.length]

    def forward(self) -> np.ndarray:
        B, G, L = self.B, self.G, self.length
        c_out = G * self.o_group
        if self.pointwise:
            return np.matmul(self.wg[..., 0, 0, 0], self.xf).reshape((B, c_out) + self.out_ext)
        if self.depthwise:
            xd = self.xf[:, :, 0]
            acc = np.zeros((B, G, L), dtype=self.x.dtype)
            for (dt, dh, dw), sh in zip(self.offsets, self.shifts):
                acc += xd[:, :, sh:sh + L] * self.wg[:, 0, 0, dt, dh, dw][None, :, None]
        else:
            acc = np.zeros((B, G, self.o_group, L), dtype=self.x.dtype)
            for (dt, dh, dw), sh in zip(self.offsets, self.shifts):
                acc += np.matmul(self.wg[:, :, :, dt, dh, dw], self.xf[..., sh:sh + L])
        return self._crop(acc.reshape(B, c_out, L))

    def backward(self, g: np.ndarray):
        B, G, L = self.B, self.G, self.length
        gw = np.zeros_like(self.wg)
        if self.pointwise:
            gg = g.reshape(B, G, self.o_group, -1)
            gw[..., 0, 0, 0] = np.einsum("bgop,bgcp->goc", gg, self.xf)
            gx = np.matmul(np.swapaxes(self.wg[..., 0, 0, 0], -1, -2), gg)
            return gx.reshape(self.x.shape), gw
        gf = self._uncrop(g)
        gxf = np.zeros(self.xf.shape, dtype=self.x.dtype)
        if self.depthwise:
            xd, gxd = self.xf[:, :, 0], gxf[:, :, 0]
            for (dt, dh, dw), sh in zip(self.offsets, self.shifts):
                gw[:, 0, 0, dt, dh, dw] = np.einsum("bcl,bcl->c", gf, xd[:, :, sh:sh + L])
                gxd[:, :, sh:sh + L] += gf * self.wg[:, 0, 0, dt, dh, dw][None, :, None]
        else:
            gg = gf.reshape(B, G, self.o_group, L)
            for (dt, dh, dw), sh in zip(self.offsets, self.shifts):
                w = self.wg[:, :, :, dt, dh, dw]
                gw[:, :, :, dt, dh, dw] = np.einsum("bgol,bgcl->goc", gg, self.xf[..., sh:sh + L])
                gxf[..., sh:sh + L] += np.matmul(np.swapaxes(w, -1, -2), gg)
        return self._unpad(gxf.reshape(self.xp.shape)), gw


class _StridedConv(_ConvKernel):
    """Strided: gather each offset's strided window directly."""

    def _window(self, arr: np.ndarray, dt: int, dh: int, dw: int) -> np.ndarray:
        (sT, sH, sW), (To, Ho, Wo) = self.strides, self.out_ext
        return arr[..., dt:dt + sT * (To - 1) + 1:sT, dh:dh + sH * (Ho - 1) + 1:sH,
                   dw:dw + sW * (Wo - 1) + 1:sW]

    def _columns(self) -> np.ndarray:
        """(B, G, c_group * K, P) patches, offsets innermost per input channel."""
        B, G = self.B, self.G
        P = int(np.prod(self.out_ext))
        xg = self.xp.reshape((B, G, self.c_group) + self.padded)
        cols = np.stack([self._window(xg, dt, dh, dw).reshape(B, G, self.c_group, P)
                         for dt, dh, dw in self.offsets], axis=3)
        return cols.reshape(B, G, self.c_group * len(self.offsets), P)

    def forward(self) -> np.ndarray:
        B, G = self.B, self.G
        if self.depthwise:
            xg = self.xp.reshape((B, G) + self.padded)
            out = np.zeros((B, G) + self.out_ext, dtype=self.x.dtype)
            for dt, dh, dw in self.offsets:
                out += self._window(xg, dt, dh, dw) * self.wg[:, 0, 0, dt, dh, dw][None, :, None, None, None]
            return out
        self.cols = self._columns()
        w2 = self.wg.reshape(G, self.o_group, -1)
        out = np.matmul(w2, self.cols)
        return out.reshape((B, G * self.o_group) + self.out_ext)

    def backward(self, g: np.ndarray):
        B, G = self.B, self.G
        P = int(np.prod(self.out_ext))
        gxp = np.zeros(self.xp.shape, dtype=self.x.dtype)
        if self.depthwise:
            gw = np.zeros_like(self.wg)
            xg = self.xp.reshape((B, G) + self.padded)
            gxg = gxp.reshape(xg.shape)
            gd = g.reshape((B, G) + self.out_ext)
            for dt, dh, dw in self.offsets:
                gw[:, 0, 0, dt, dh, dw] = np.einsum("bcthw,bcthw->c", gd, self._window(xg, dt, dh, dw))
                self._window(gxg, dt, dh, dw)[...] += \
                    gd * self.wg[:, 0, 0, dt, dh, dw][None, :, None, None, None]
            return self._unpad(gxp), gw
        K = len(self.offsets)
        gg = g.reshape(B, G, self.o_group, P)
        w2 = self.wg.reshape(G, self.o_group, -1)
        gw = np.einsum("bgop,bgkp->gok", gg, self.cols).reshape(self.wg.shape)
        gcols = np.matmul(np.swapaxes(w2, -1, -2), gg).reshape(B, G, self.c_group, K, P)
        gxg = gxp.reshape((B, G, self.c_group) + self.padded)
        for i, (dt, dh, dw) in enumerate(self.offsets):
            self._window(gxg, dt, dh, dw)[...] += gcols[:, :, :, i].reshape((B, G, self.c_group) + self.out_ext)
        return self._unpad(gxp), gw

def gaussian_sample(shape, rng: np.random.Generator, dtype=None) -> Tensor:
    """Standard normal draws as an untracked tensor."""
    dtype = np.dtype(dtype) if dtype is not None else _default_dtype
    return Tensor(rng.standard_normal(tuple(shape)).astype(dtype))


# -- backward ----------------------------------------------------------

def _topo_order(root: Tensor) -> list:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if grad is None:
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        return
    grads = {id(loss): grad}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.dtype)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if isinstance(t, Parameter)]
