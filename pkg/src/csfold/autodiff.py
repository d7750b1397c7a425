"""Dense float tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array. While a ``Tape`` is
active, every operation that touches a gradient-carrying tensor appends a
record (output, parents, backward rule) to that tape; ``backward(loss)``
replays the records in reverse, accumulating exactly one gradient
contribution per use of each tensor. With no tape active the same
functions run as plain forward kernels.

Everything computes in ``default_dtype()`` — float32 normally, float64
under ``precision("float64")`` for tight gradient-tolerance testing.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractError, DimensionError, NumericalError

_DEFAULT_DTYPE = np.dtype(np.float32)
_DEBUG_CHECKS = False
_TAPE_STACK: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the global compute precision ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (used by the 64-bit test mode)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug_checks(enabled: bool) -> None:
    """Toggle the finite-output assertion run after every forward kernel."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """Dense N-d float array, optionally carrying a gradient buffer.

    ``requires_grad`` marks tensors whose ``grad`` buffer backward must
    fill (parameters, probed inputs). Tensors produced by operations carry
    an internal on-the-differentiable-path marker instead, so backward
    flows gradients through them without storing a buffer on every
    intermediate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = False

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data outside any gradient graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._tracked = False
        return out

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flags})"


class Tape:
    """Ordered record of executed operations for one forward pass.

    Appending order is execution order, so the reversed record list is a
    valid reverse topological order of the graph. ``clear()`` drops every
    recorded intermediate.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> None:
        self._records.append((out, parents, rule))

    def clear(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every gradient-carrying tensor reachable from ``loss``."""
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise ContractError("backward() on an empty tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        for out, parents, rule in reversed(self._records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            holders.pop(id(out), None)
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not (parent.requires_grad or parent._tracked):
                    continue
                key = id(parent)
                acc = pending.get(key)
                pending[key] = pg if acc is None else acc + pg
                holders[key] = parent

        for key, g in pending.items():
            leaf = holders[key]
            if leaf.requires_grad:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation on the innermost active tape."""
    if not _TAPE_STACK:
        raise ContractError("backward() requires an active Tape context")
    _TAPE_STACK[-1].backward(loss)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value))


def _finish(out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise NumericalError("non-finite values in operation output")
    if _TAPE_STACK and any(p.requires_grad or p._tracked for p in parents):
        out._tracked = True
        _TAPE_STACK[-1].record(out, parents, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the originating shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError as exc:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(out, (a, b), rule)


def scale(t: Tensor, s) -> Tensor:
    """Multiply by a scalar: a python number or a learnable 1-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ContractError(f"scale() needs a 1-element scalar tensor, got shape {s.shape}")
        return mul(t, s)
    out = Tensor(t.data * _DEFAULT_DTYPE.type(s))

    def rule(g):
        return (g * _DEFAULT_DTYPE.type(s),)

    return _finish(out, (t,), rule)


def gelu(t: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, 0.5·x·(1 + erf(x/√2))."""
    x = t.data
    cdf = x * _DEFAULT_DTYPE.type(1.0 / math.sqrt(2.0))
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5
    out = Tensor(x * cdf)

    def rule(g):
        slope = x * x
        slope *= -0.5
        np.exp(slope, out=slope)
        slope *= _DEFAULT_DTYPE.type(1.0 / math.sqrt(2.0 * math.pi))
        slope *= x
        slope += cdf
        slope *= g
        return (slope,)

    return _finish(out, (t,), rule)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(t.data.reshape(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {t.shape} as {shape}") from exc
    src = t.shape

    def rule(g):
        return (g.reshape(src),)

    return _finish(out, (t,), rule)


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for ndim {t.ndim}")
    out = Tensor(np.ascontiguousarray(np.transpose(t.data, axes)))
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _finish(out, (t,), rule)


def transpose2d(t: Tensor) -> Tensor:
    """Swap the last two axes (matrix transpose, batched if leading axes exist)."""
    if t.ndim < 2:
        raise DimensionError(f"transpose2d needs ndim >= 2, got {t.ndim}")
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return permute(t, axes)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    ax = axis if axis >= 0 else out.ndim + axis
    extents = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def rule(g):
        moved = np.moveaxis(g, ax, 0)
        return tuple(
            np.ascontiguousarray(np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, ax))
            for i in range(len(tensors))
        )

    return _finish(out, tuple(tensors), rule)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis if axis >= 0 else t.ndim + axis
    if not (0 <= ax < t.ndim):
        raise DimensionError(f"slice_axis: axis {axis} invalid for ndim {t.ndim}")
    if not (0 <= start < stop <= t.shape[ax]):
        raise DimensionError(f"slice_axis: range [{start}, {stop}) invalid for extent {t.shape[ax]}")
    index = (slice(None),) * ax + (slice(start, stop),)
    out = Tensor(t.data[index])
    src_shape = t.shape

    def rule(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _finish(out, (t,), rule)


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    """Slice the channel axis of a [..., C, H, W] tensor."""
    if t.ndim < 3:
        raise DimensionError(f"slice_channels needs ndim >= 3, got {t.ndim}")
    return slice_axis(t, t.ndim - 3, start, stop)


def sum_all(t: Tensor) -> Tensor:
    out = Tensor(t.data.sum())
    shape = t.shape

    def rule(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _finish(out, (t,), rule)


def mean_all(t: Tensor) -> Tensor:
    n = t.size
    out = Tensor(t.data.mean())
    shape = t.shape

    def rule(g):
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=True),)

    return _finish(out, (t,), rule)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs ndim >= 2 on both sides")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish(out, (a, b), rule)


def softmax(t: Tensor, axis: int) -> Tensor:
    """Numerically-stable softmax; slices along ``axis`` sum to one."""
    ax = axis if axis >= 0 else t.ndim + axis
    if not (0 <= ax < t.ndim):
        raise DimensionError(f"softmax: axis {axis} invalid for ndim {t.ndim}")
    shifted = t.data - t.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(y)

    def rule(g):
        inner = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - inner),)

    return _finish(out, (t,), rule)


def layer_norm(t: Tensor, axis, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over ``axis`` (int or tuple) then apply a broadcast affine.

    ``gamma``/``beta`` must broadcast against the input; their gradients are
    reduced back to their own shapes. ``eps > 0`` keeps single-element axes
    finite (they standardize to zero, so the output is just ``beta``).
    """
    if eps <= 0:
        raise ConfigurationError("layer_norm needs eps > 0")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a if a >= 0 else t.ndim + a for a in axes)
    for a in axes:
        if not (0 <= a < t.ndim):
            raise DimensionError(f"layer_norm: axis {a} invalid for ndim {t.ndim}")
    m = int(np.prod([t.shape[a] for a in axes]))
    mu = t.data.mean(axis=axes, keepdims=True)
    centered = t.data - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + _DEFAULT_DTYPE.type(eps))
    xhat = centered * inv
    try:
        out = Tensor(gamma.data * xhat + beta.data)
    except ValueError as exc:
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not broadcast over {t.shape}"
        ) from exc

    def rule(g):
        gy = g * gamma.data
        mean_gy = gy.mean(axis=axes, keepdims=True)
        mean_gy_xhat = (gy * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gy - mean_gy - xhat * mean_gy_xhat)
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _finish(out, (t, gamma, beta), rule)


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation on [C,H,W] or [N,C,H,W] input.

    ``weight`` is [Cout, Cin/groups, kh, kw]; zero padding; gradients reach
    the input, the weight, and the bias. Depthwise (groups == Cin) takes an
    elementwise fast path, everything else runs one channel-GEMM per kernel
    offset.
    """
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-d, got shape {weight.shape}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got shape {x.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigurationError("conv2d: stride >= 1, padding >= 0, groups >= 1 required")

    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigurationError(f"conv2d: groups={groups} must divide Cin={cin} and Cout={cout}")
    if cg != cin // groups:
        raise DimensionError(f"conv2d: weight expects Cin/groups={cg}, input has {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)

    xpad = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    depthwise = groups == cin and cout == cin
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    og = cout // groups
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1

    def offset_view(source, i, j):
        return source[:, :, i:i + span_h:stride, j:j + span_w:stride]

    if depthwise:
        # strided views + broadcast multiplies, no intermediate copies
        wd = weight.data
        od = np.zeros((n, cout, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                od += wd[:, 0, i, j][None, :, None, None] * offset_view(xpad, i, j)
    elif pointwise:
        w2 = weight.data.reshape(groups, og, cg)
        xs = xd.reshape(n, groups, cg, h * w)
        od = np.matmul(w2, xs).reshape(n, cout, ho, wo)
    else:
        acc = np.zeros((n, cout, ho * wo), dtype=xd.dtype)
        wg = weight.data.reshape(groups, og, cg, kh, kw)
        for i in range(kh):
            for j in range(kw):
                xs = offset_view(xpad, i, j).reshape(n, groups, cg, ho * wo)
                acc += np.matmul(wg[:, :, :, i, j], xs).reshape(n, cout, ho * wo)
        od = acc.reshape(n, cout, ho, wo)
    if bias is not None:
        od += bias.data.reshape(1, cout, 1, 1)
    out = Tensor(od if batched else od[0])

    def rule(g):
        gd = g if batched else g[None]
        gw = np.zeros_like(weight.data)
        if depthwise:
            gxpad = np.zeros_like(xpad)
            for i in range(kh):
                for j in range(kw):
                    xs = offset_view(xpad, i, j)
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gd, xs)
                    offset_view(gxpad, i, j)[...] += weight.data[:, 0, i, j][None, :, None, None] * gd
            gx = gxpad[:, :, padding:padding + h, padding:padding + w] if padding else gxpad
        elif pointwise:
            w2 = weight.data.reshape(groups, og, cg)
            xs = xd.reshape(n, groups, cg, h * w)
            gacc = gd.reshape(n, groups, og, ho * wo)
            gw[...] = np.matmul(gacc, xs.transpose(0, 1, 3, 2)).sum(axis=0).reshape(gw.shape)
            gx = np.matmul(w2.transpose(0, 2, 1), gacc).reshape(n, cin, h, w)
        else:
            gxpad = np.zeros_like(xpad)
            wg = weight.data.reshape(groups, og, cg, kh, kw)
            gwg = gw.reshape(groups, og, cg, kh, kw)
            gacc = gd.reshape(n, groups, og, ho * wo)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + span_h, stride), slice(j, j + span_w, stride))
                    xs = xpad[sl].reshape(n, groups, cg, ho * wo)
                    gwg[:, :, :, i, j] = np.matmul(gacc, xs.transpose(0, 1, 3, 2)).sum(axis=0)
                    gxs = np.matmul(wg[:, :, :, i, j].transpose(0, 2, 1), gacc)
                    gxpad[sl] += gxs.reshape(n, cin, ho, wo)
            gx = gxpad[:, :, padding:padding + h, padding:padding + w] if padding else gxpad
        gx = gx if batched else gx[0]
        if bias is not None:
            return gx, gw, gd.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _finish(out, parents, rule)
