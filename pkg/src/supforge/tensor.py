"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs in 64-bit floats so finite-difference gradient checks at
1e-4 relative tolerance are meaningful. Operations record onto the
innermost active :class:`Tape`; with no tape active they run forward-only,
which is how detached inference is done. Subgradients at relu/clamp kinks
are 0, and layout is row-major throughout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names the dims."""


_TAPE_STACK: list["Tape"] = []


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    Treat tensors as immutable once created; ops return new tensors.
    ``grad`` is populated on requires_grad leaves by :func:`backward` and
    always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "tape")

    def __init__(self, out, parents, backward_fn, tape):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of executed ops; replayed in reverse by backward().

    A tape may be consumed by backward() exactly once; call reset() (or use
    a fresh tape) before recording again.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes.clear()
        self._consumed = False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(out_data, parents, backward_fn) -> Tensor:
    """Wrap op output in a Tensor and record it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent. Recording only happens when a tape is active and some parent
    participates in differentiation; otherwise the result is detached.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is None:
        return out
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    node = _Node(out, parents, backward_fn, tape)
    out._node = node
    tape._nodes.append(node)
    return out


def backward(loss: Tensor):
    """Accumulate dloss/dleaf into .grad of every reachable requires_grad leaf.

    Visits the recording tape in exact reverse execution order. Leaves that
    were recorded on the tape but are unreachable from ``loss`` end up with
    zero grads. A second backward on the same tape raises; reset first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    node = loss._node
    if node is None:
        raise RuntimeError("loss was not recorded on an active tape")
    tape = node.tape
    if tape._consumed:
        raise RuntimeError("tape already consumed by backward(); call reset() first")
    if not tape._nodes:
        raise RuntimeError("tape is empty")

    # Tensors that can influence loss, found by walking the graph upstream.
    reachable = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        reachable.add(id(t))
        if t._node is not None:
            stack.extend(t._node.parents)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if parent._node is not None:
                if parent._node.tape is tape and id(parent) in reachable:
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            elif parent.requires_grad:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + pg

    # Leaves that took part in this tape but never received gradient.
    for node in tape._nodes:
        for parent in node.parents:
            if parent._node is None and parent.requires_grad and parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
    tape._consumed = True


def _unbroadcast(g, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record_op(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record_op(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return record_op(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return record_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0.0
    out = np.where(pos, a.data, slope * a.data)
    return record_op(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)  # sign(0) == 0, matching the kink convention
    return record_op(np.abs(a.data), (a,), lambda g: (g * s,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return record_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for ndim {a.data.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return record_op(p, (a,), bw)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"sum axis {axis} out of range for ndim {a.data.ndim}")
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return record_op(out, (a,), bw)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"mean axis {axis} out of range for ndim {a.data.ndim}")
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape).copy(),)

    return record_op(out, (a,), bw)


# Spec names for the reductions; numpy-style shadowing of the builtins.
sum = tsum
mean = tmean
abs = absolute


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber): x^2/(2*beta) inside |x|<beta, else |x|-beta/2."""
    a = as_tensor(a)
    if beta <= 0:
        raise ValueError(f"smooth_l1 beta must be > 0, got {beta}")
    x = a.data
    inner = np.abs(x) < beta
    out = np.where(inner, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    grad = np.where(inner, x / beta, np.sign(x))
    return record_op(out, (a,), lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(input, weight, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution (cross-correlation) over [C_in,H,W] with zero padding.

    weight is [C_out,C_in,k,k] with k odd, bias is [C_out]. Differentiable
    w.r.t. input, weight and bias.
    """
    x, w, b = as_tensor(input), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be [C_out,C_in,k,k], got {w.data.shape}")
    c_in, h, wd = x.data.shape
    c_out, c_in_w, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if c_in_w != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, weight expects {c_in_w}")
    if b.data.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be [{c_out}], got {b.data.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    k = kh
    h2 = (h + 2 * pad - k) // stride + 1
    w2 = (wd + 2 * pad - k) // stride + 1
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"conv2d output would be {h2}x{w2} for input {h}x{wd}, k={k}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # cols: [C_in*k*k, h2*w2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, h2 * w2)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out = (wmat @ cols).reshape(c_out, h2, w2) + b.data[:, None, None]

    def bw(g):
        gmat = g.reshape(c_out, h2 * w2)
        gw = (gmat @ cols.T).reshape(w.data.shape)
        gb = g.sum(axis=(1, 2))
        gcols = (wmat.T @ gmat).reshape(c_in, k, k, h2, w2)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * h2:stride, j:j + stride * w2:stride] += gcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return record_op(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _bilinear_parts(shape_hw, ys, xs):
    """Corner indices/weights/masks for bilinear reads at fractional (ys, xs)."""
    h, w = shape_hw
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    parts = []
    for dy, dx, wgt in (
        (0, 0, (1.0 - wy) * (1.0 - wx)),
        (0, 1, (1.0 - wy) * wx),
        (1, 0, wy * (1.0 - wx)),
        (1, 1, wy * wx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(ok, yy * w + xx, 0)
        parts.append((idx, wgt, ok))
    return parts, wy, wx


def _bilinear_gather(data, ys, xs):
    """Sample data [C,H,W] at flat fractional positions; OOB neighbors read 0.

    Returns (values [C,N], cache for the adjoint helpers).
    """
    c, h, w = data.shape
    flat = data.reshape(c, h * w)
    parts, wy, wx = _bilinear_parts((h, w), ys, xs)
    corner_vals = []
    vals = np.zeros((c, ys.size), dtype=np.float64)
    for idx, wgt, ok in parts:
        v = flat[:, idx] * ok
        corner_vals.append(v)
        vals += v * wgt
    cache = (parts, wy, wx, corner_vals, (c, h, w))
    return vals, cache


def _bilinear_scatter_data(cache, gvals):
    """Adjoint of _bilinear_gather w.r.t. data: gvals [C,N] -> [C,H,W]."""
    parts, _, _, _, (c, h, w) = cache
    acc = np.zeros((c, h * w), dtype=np.float64)
    for idx, wgt, ok in parts:
        contrib = gvals * (wgt * ok)
        for ch in range(c):
            acc[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)
    return acc.reshape(c, h, w)


def _bilinear_pos_grad(cache, gvals):
    """Adjoint of _bilinear_gather w.r.t. positions: -> (gys [N], gxs [N])."""
    _, wy, wx, (v00, v01, v10, v11), _ = cache
    dvdy = (v10 - v00) * (1.0 - wx) + (v11 - v01) * wx
    dvdx = (v01 - v00) * (1.0 - wy) + (v11 - v10) * wy
    gys = (gvals * dvdy).sum(axis=0)
    gxs = (gvals * dvdx).sum(axis=0)
    return gys, gxs


def bilinear_sample(input, y, x) -> Tensor:
    """Bilinearly interpolate input [C,H,W] at one fractional (y, x) -> [C].

    Out-of-bounds neighbors contribute 0. Differentiable w.r.t. input always,
    and w.r.t. y/x when they are passed as tensors.
    """
    inp = as_tensor(input)
    yt = as_tensor(y)
    xt = as_tensor(x)
    if inp.data.ndim != 3:
        raise ShapeError(f"bilinear_sample input must be [C,H,W], got {inp.data.shape}")
    ys = yt.data.reshape(1).astype(np.float64)
    xs = xt.data.reshape(1).astype(np.float64)
    vals, cache = _bilinear_gather(inp.data, ys, xs)

    def bw(g):
        gv = g.reshape(-1, 1)
        gdata = _bilinear_scatter_data(cache, gv)
        gys, gxs = _bilinear_pos_grad(cache, gv)
        return gdata, gys.reshape(yt.data.shape), gxs.reshape(xt.data.shape)

    return record_op(vals[:, 0], (inp, yt, xt), bw)


def upsample_bilinear(input, out_h: int, out_w: int) -> Tensor:
    """Resize [H,W] or [C,H,W] to (out_h, out_w) with corner-aligned bilinear."""
    a = as_tensor(input)
    squeeze = a.data.ndim == 2
    data = a.data[None] if squeeze else a.data
    if data.ndim != 3:
        raise ShapeError(f"upsample_bilinear input must be 2D or 3D, got {a.data.shape}")
    c, h, w = data.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    grid_y = np.repeat(ys, out_w)
    grid_x = np.tile(xs, out_h)
    vals, cache = _bilinear_gather(data, grid_y, grid_x)
    out = vals.reshape(c, out_h, out_w)
    if squeeze:
        out = out[0]

    def bw(g):
        gv = g.reshape(c, out_h * out_w)
        gdata = _bilinear_scatter_data(cache, gv)
        return (gdata[0] if squeeze else gdata,)

    return record_op(out, (a,), bw)
