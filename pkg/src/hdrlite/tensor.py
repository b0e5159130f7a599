"""Dense 4-D float tensor engine with reverse-mode automatic differentiation.

Everything is laid out as (batch, channel, height, width), contiguous, with
width fastest.  The graph is define-by-run: each op node keeps references to
its parents and a backward closure, and the tape is rebuilt on every forward
pass.  Tensors default to float32; building a graph from float64 arrays gives
a 64-bit check mode for finite-difference verification.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)

# Op-name trace for graph inspection (activation census etc.).  Appended to
# only while a trace list is installed via trace_ops().
_op_trace: list | None = None


@contextlib.contextmanager
def trace_ops():
    """Record the name of every op node created inside the block."""
    global _op_trace
    prev = _op_trace
    _op_trace = []
    try:
        yield _op_trace
    finally:
        _op_trace = prev


class Tensor:
    """A (n, c, h, w) array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D (n,c,h,w), got shape {arr.shape}")
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution layer."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride, self.groups) < 1:
            raise ValueError(f"conv spec fields must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in={self.in_channels} and out={self.out_channels}"
            )

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def bias_count(self) -> int:
        return self.out_channels

    def out_hw(self, h: int, w: int):
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return oh, ow


def _node(data, op: str, parents, backward=None) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    out.op = op
    if _op_trace is not None:
        _op_trace.append(op)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a scalar loss over the recorded tape."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        _accum(x, g * s)

    return _node(x.data * s, "scale", (x,), bwd)


def mul_const(x: Tensor, arr) -> Tensor:
    """Multiply by a fixed array that carries no gradient (e.g. a mask)."""
    arr = np.asarray(arr, dtype=x.dtype)

    def bwd(g):
        _accum(x, _unbroadcast(g * arr, x.shape))

    return _node(x.data * arr, "mul_const", (x,), bwd)


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def bwd(g):
        _accum(x, g * sign)

    return _node(np.abs(x.data), "abs", (x,), bwd)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def bwd(g):
        _accum(x, g * keep)

    return _node(np.where(keep, x.data, 0), "relu", (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0,1), got {slope}")
    pos = x.data > 0

    def bwd(g):
        _accum(x, g * np.where(pos, 1.0, slope))

    return _node(np.where(pos, x.data, x.data * slope), "leaky_relu", (x,), bwd)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def mean_all(x: Tensor) -> Tensor:
    inv = 1.0 / x.data.size

    def bwd(g):
        _accum(x, np.full_like(x.data, g.reshape(()) * inv))

    return _node(x.data.mean().reshape(1, 1, 1, 1), "mean_all", (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        _accum(x, np.full_like(x.data, g.reshape(())))

    return _node(x.data.sum().reshape(1, 1, 1, 1), "sum_all", (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def bwd(g):
        _accum(x, np.broadcast_to(g * inv, x.shape).copy())

    return _node(x.data.mean(axis=(2, 3), keepdims=True), "global_avg_pool", (x,), bwd)


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat spatial/batch mismatch: {ref} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, c0, c1 in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, c0:c1])

    return _node(np.concatenate([t.data for t in tensors], axis=1), "concat", tensors, bwd)


def narrow_channels(x: Tensor, start: int, length: int) -> Tensor:
    if start < 0 or start + length > x.shape[1]:
        raise ValueError(f"channel slice [{start}, {start + length}) out of range for {x.shape}")

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, start:start + length] = g
        _accum(x, full)

    return _node(x.data[:, start:start + length].copy(), "narrow", (x,), bwd)


def down2(x: Tensor) -> Tensor:
    """2x2 average pooling."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"down2 needs even spatial dims, got {h}x{w}")
    pooled = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        _accum(x, gx)

    return _node(pooled, "down2", (x,), bwd)


def up2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        gx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        _accum(x, gx)

    return _node(out, "up2", (x,), bwd)


def _reflect_index(n: int, pad: int):
    if pad >= n:
        raise ValueError(f"reflect pad {pad} too large for size {n}")
    idx = np.arange(n + pad)
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def pad_reflect(x: Tensor, ph: int, pw: int) -> Tensor:
    """Reflect-pad the bottom/right edges by (ph, pw)."""
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    iy = _reflect_index(h, ph)
    ix = _reflect_index(w, pw)
    out = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")

    def bwd(g):
        tmp = np.zeros((n, c, h, w + pw), dtype=g.dtype)
        np.add.at(tmp, (slice(None), slice(None), iy), g)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), slice(None), ix), tmp)
        _accum(x, gx)

    return _node(out, "pad_reflect", (x,), bwd)


def crop(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    n, c, xh, xw = x.shape
    if top + h > xh or left + w > xw or top < 0 or left < 0:
        raise ValueError(f"crop ({top},{left},{h},{w}) out of range for {x.shape}")
    if top == 0 and left == 0 and h == xh and w == xw:
        return x

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :, top:top + h, left:left + w] = g
        _accum(x, gx)

    return _node(x.data[:, :, top:top + h, left:left + w].copy(), "crop", (x,), bwd)


def grad_map(x: Tensor) -> Tensor:
    """Forward differences along x and y, zero at the last column/row.

    Output has 2c channels: first c horizontal, then c vertical.
    """
    n, c, h, w = x.shape
    out = np.zeros((n, 2 * c, h, w), dtype=x.dtype)
    out[:, :c, :, :-1] = x.data[:, :, :, 1:] - x.data[:, :, :, :-1]
    out[:, c:, :-1, :] = x.data[:, :, 1:, :] - x.data[:, :, :-1, :]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gh = g[:, :c, :, :-1]
        gv = g[:, c:, :-1, :]
        gx[:, :, :, 1:] += gh
        gx[:, :, :, :-1] -= gh
        gx[:, :, 1:, :] += gv
        gx[:, :, :-1, :] -= gv
        _accum(x, gx)

    return _node(out, "grad_map", (x,), bwd)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _conv_forward(xp, weight, stride, oh, ow, groups):
    """Direct convolution on pre-padded input, accumulating over kernel offsets."""
    n = xp.shape[0]
    oc, icg, k, _ = weight.shape
    out = np.zeros((n, oc, oh, ow), dtype=xp.dtype)
    ocg = oc // groups
    for g in range(groups):
        xg = xp[:, g * icg:(g + 1) * icg]
        og = out[:, g * ocg:(g + 1) * ocg]
        wg = weight[g * ocg:(g + 1) * ocg]
        for i in range(k):
            for j in range(k):
                patch = xg[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                # (ocg, icg) x (n, icg, oh, ow) -> (ocg, n, oh, ow)
                og += np.tensordot(wg[:, :, i, j], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution; pointwise and grouped cases share this path."""
    n, c, h, w = x.shape
    oc, icg, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {weight.shape}")
    if c % groups or oc % groups:
        raise ValueError(f"groups={groups} must divide channels ({c} -> {oc})")
    if icg != c // groups:
        raise ValueError(f"weight expects {icg * groups} input channels, got {c}")
    if bias is not None and bias.shape != (1, oc, 1, 1):
        raise ValueError(f"bias must be (1,{oc},1,1), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv output would be empty for input {h}x{w}, kernel {k}")
    out = _conv_forward(xp, weight.data, stride, oh, ow, groups)
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        ocg = oc // groups
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1))
        dw = np.zeros_like(weight.data) if weight.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for gi in range(groups):
            xg = xp[:, gi * icg:(gi + 1) * icg]
            gg = g[:, gi * ocg:(gi + 1) * ocg]
            wg = weight.data[gi * ocg:(gi + 1) * ocg]
            for i in range(k):
                for j in range(k):
                    sl_h = slice(i, i + stride * oh, stride)
                    sl_w = slice(j, j + stride * ow, stride)
                    if dw is not None:
                        # (n, ocg, oh, ow) x (n, icg, oh, ow) summed over n,oh,ow
                        dw[gi * ocg:(gi + 1) * ocg, :, i, j] += np.tensordot(
                            gg, xg[:, :, sl_h, sl_w], axes=([0, 2, 3], [0, 2, 3]))
                    if dxp is not None:
                        dxp[:, gi * icg:(gi + 1) * icg, sl_h, sl_w] += np.tensordot(
                            wg[:, :, i, j], gg, axes=([0], [1])).transpose(1, 0, 2, 3)
        if dw is not None:
            _accum(weight, dw)
        if dxp is not None:
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            _accum(x, gx)

    return _node(out, "conv2d", parents, bwd)


def mask_window_sum(mask, k: int, padding: int, pad_value: float = 0.0):
    """Sum of a 1-channel mask over each k x k window (plain numpy helper)."""
    mp = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=pad_value) if padding else mask
    n, c, hp, wp = mp.shape
    oh, ow = hp - k + 1, wp - k + 1
    out = np.zeros((n, c, oh, ow), dtype=mask.dtype)
    for i in range(k):
        for j in range(k):
            out += mp[:, :, i:i + oh, j:j + ow]
    return out


def partial_conv(x: Tensor, mask, weight: Tensor, bias: Tensor | None = None, *,
                 padding: int = 0, groups: int = 1):
    """Mask-gated convolution with per-window renormalization.

    mask is a fixed (n,1,h,w) array in [0,1]; it gates the input, scales each
    window by area/mask_sum, and propagates as 1 wherever the window saw any
    valid pixel.  Returns (output, updated_mask).

    Out-of-bounds area counts as fully valid for the renormalization so an
    all-ones mask reproduces a plain convolution exactly, borders included;
    validity itself is judged on in-bounds pixels only.
    """
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape != (x.shape[0], 1, x.shape[2], x.shape[3]):
        raise ValueError(f"mask shape {mask.shape} does not match input {x.shape}")
    k = weight.shape[2]
    msum = mask_window_sum(mask, k, padding, pad_value=1.0)
    valid = mask_window_sum(mask, k, padding, pad_value=0.0) > 1e-8
    ratio = np.where(valid, (k * k) / np.maximum(msum, 1e-8), 0.0)
    new_mask = valid.astype(x.dtype)

    y = conv2d(mul_const(x, mask), weight, None, padding=padding, groups=groups)
    y = mul_const(y, ratio)
    if bias is not None:
        y = add(y, bias)
    return y, new_mask


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def gradient_check(fn, tensors, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps the tensors to a scalar Tensor.  The check runs on whatever dtype
    the tensors carry; pass float64 data for full fidelity.  The error is
    ||analytic - numeric||_inf normalized by ||numeric||_inf per tensor.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn(*tensors)
    backward(loss)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = fn(*tensors).item()
            flat[idx] = orig - eps
            lo = fn(*tensors).item()
            flat[idx] = orig
            nflat[idx] = (hi - lo) / (2 * eps)
        denom = max(np.abs(numeric).max(), 1e-10)
        worst = max(worst, float(np.abs(analytic - numeric).max() / denom))
    return worst
