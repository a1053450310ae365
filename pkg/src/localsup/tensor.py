"""Minimal reverse-mode autodiff over dense float64 tensors.

Eager execution with a taped graph: every tracked op records the tensors it
keeps alive for the pending backward pass on the active Graph, so
``Graph.retained_bytes`` is a faithful proxy for live activation memory.
All math is float64 end to end; gradients are checked against central finite
differences (see :func:`gradient_check`).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "Parameter",
    "Graph",
    "active_graph",
    "no_grad",
    "ShapeMismatchError",
    "CropBoundsError",
    "backward",
    "detach",
    "add",
    "mul",
    "tsum",
    "tmean",
    "amax",
    "relu",
    "tanh",
    "sigmoid",
    "tlog",
    "softmax",
    "matmul",
    "linear",
    "to_instances",
    "transpose2d",
    "reshape",
    "concat",
    "crop",
    "crop_batch",
    "upsample_nearest",
    "conv2d",
    "maxpool2d",
    "adaptive_avgpool2d",
    "cross_entropy",
    "l1_loss",
    "numeric_gradient",
    "gradient_check",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axes."""


class CropBoundsError(ValueError):
    """Raised when a crop region leaves the tensor; carries region and extent."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording and gradient tracking."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Tensors are immutable by convention after construction (optimizers mutate
    ``data`` in place between graph lifetimes). A tensor created with
    ``requires_grad=False`` is a constant and never accumulates gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_param", "_prev", "_backward", "_graph")

    def __init__(self, data, requires_grad: bool = False, is_param: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: Optional[np.ndarray] = None
        self.is_param = is_param
        self._prev: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._graph: Optional["Graph"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Convenience arithmetic used by loss composition.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other)


def Parameter(data, requires_grad: bool = True) -> Tensor:
    """A trainable tensor; excluded from activation accounting."""
    return Tensor(data, requires_grad=requires_grad, is_param=True)


class Graph:
    """Tape of executed ops plus the activation bytes they keep alive.

    ``retained_bytes`` counts every non-parameter tensor referenced by a
    recorded op (inputs and outputs, deduplicated), times 8 bytes per
    element. Parameters are excluded: the model keeps them alive, not the
    tape. ``release()`` empties the tape, which is what :func:`backward`
    does once gradients have been propagated.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple, Tensor]] = []
        self.retained_bytes = 0
        self.peak_retained_bytes = 0
        self._seen: set[int] = set()

    def record(self, name: str, inputs: tuple, output: Tensor):
        self.nodes.append((name, inputs, output))
        for t in inputs + (output,):
            if isinstance(t, Tensor) and not t.is_param and id(t) not in self._seen:
                self._seen.add(id(t))
                self.retained_bytes += t.data.size * 8
        if self.retained_bytes > self.peak_retained_bytes:
            self.peak_retained_bytes = self.retained_bytes
        output._graph = self

    def release(self):
        self.nodes.clear()
        self._seen.clear()
        self.retained_bytes = 0

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack.pop()
        return False


_graph_stack: list[Graph] = [Graph()]


def active_graph() -> Graph:
    return _graph_stack[-1]


def _wrap(out_data: np.ndarray, inputs: tuple, backward_fn, name: str) -> Tensor:
    """Build the output tensor and record the op if gradients are live."""
    track = _grad_enabled and any(t.requires_grad for t in inputs if isinstance(t, Tensor))
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._prev = tuple(t for t in inputs if isinstance(t, Tensor))
        out._backward = backward_fn
        active_graph().record(name, out._prev, out)
    return out


def _acc(t: Tensor, g: np.ndarray):
    """Accumulate gradient into a tensor that wants one."""
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor):
    """Propagate gradients from a scalar loss, then free the tape.

    Populates ``grad`` on every requires_grad tensor in the loss's ancestry
    and leaves all other tensors untouched. The recording graph's retained
    activations are released afterward.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor outside any tracked graph")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if loss._graph is not None:
        loss._graph.release()


def detach(x: Tensor) -> Tensor:
    """Value-equal constant sharing no gradient path with ``x``."""
    return Tensor(x.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives


def _coerce(other) -> Tensor:
    return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))


def add(a: Tensor, b) -> Tensor:
    """Elementwise add; the second operand may be a python scalar."""
    b = _coerce(b)
    if b.data.shape not in ((), a.data.shape) and a.data.shape != ():
        raise ShapeMismatchError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data + b.data

    def bwd(g):
        _acc(a, g if a.data.shape == g.shape else np.sum(g))
        _acc(b, g if b.data.shape == g.shape else np.sum(g))

    return _wrap(out_data, (a, b), bwd, "add")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise multiply; the second operand may be a python scalar."""
    b = _coerce(b)
    if b.data.shape not in ((), a.data.shape) and a.data.shape != ():
        raise ShapeMismatchError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        _acc(a, ga if a.data.shape == ga.shape else np.sum(ga))
        _acc(b, gb if b.data.shape == gb.shape else np.sum(gb))

    return _wrap(out_data, (a, b), bwd, "mul")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    def bwd(g):
        _acc(x, np.full(x.data.shape, float(g)))

    return _wrap(np.asarray(x.data.sum()), (x,), bwd, "sum")


def tmean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean over all elements (axis=None) or along one axis."""
    if axis is None:
        n = x.data.size

        def bwd(g):
            _acc(x, np.full(x.data.shape, float(g) / n))

        return _wrap(np.asarray(x.data.mean()), (x,), bwd, "mean")

    n = x.data.shape[axis]

    def bwd_axis(g):
        _acc(x, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _wrap(x.data.mean(axis=axis), (x,), bwd_axis, "mean")


def amax(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first maximum."""
    idx = np.argmax(x.data, axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _acc(x, gx)

    return _wrap(out_data, (x,), bwd, "amax")


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0

    def bwd(g):
        _acc(x, g * mask)

    return _wrap(np.where(mask, x.data, 0.0), (x,), bwd, "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bwd(g):
        _acc(x, g * (1.0 - t * t))

    return _wrap(t, (x,), bwd, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        _acc(x, g * s * (1.0 - s))

    return _wrap(s, (x,), bwd, "sigmoid")


def tlog(x: Tensor) -> Tensor:
    """Natural log, elementwise."""
    def bwd(g):
        _acc(x, g / x.data)

    return _wrap(np.log(x.data), (x,), bwd, "log")


def softmax(x: Tensor) -> Tensor:
    """Softmax over a 1-D vector."""
    if x.data.ndim != 1:
        raise ShapeMismatchError(f"softmax expects a 1-D vector, got shape {x.data.shape}")
    z = x.data - x.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def bwd(g):
        _acc(x, s * (g - np.dot(s, g)))

    return _wrap(s, (x,), bwd, "softmax")


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner axes differ, a.shape[1]={a.data.shape[1]} vs b.shape[0]={b.data.shape[0]}")

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _wrap(a.data @ b.data, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map rows of x: x @ weight.T (+ bias), weight (out, in), bias (out,)."""
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"linear expects 2-D input, got {x.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeMismatchError(
            f"linear: in_features mismatch, x.shape[1]={x.data.shape[1]} vs weight.shape[1]={weight.data.shape[1]}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data

    def bwd(g):
        _acc(x, g @ weight.data)
        _acc(weight, g.T @ x.data)
        if bias is not None:
            _acc(bias, g.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _wrap(out_data, inputs, bwd, "linear")


def to_instances(x: Tensor) -> Tensor:
    """Flatten a (1, C, H, W) feature map into (H*W, C) instance rows."""
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise ShapeMismatchError(f"to_instances expects a (1, C, H, W) map, got {x.data.shape}")
    _, c, h, w = x.data.shape

    def bwd(g):
        _acc(x, g.T.reshape(1, c, h, w))

    return _wrap(x.data.reshape(c, h * w).T.copy(), (x,), bwd, "to_instances")


def transpose2d(x: Tensor) -> Tensor:
    """Transpose a 2-D tensor (materialized copy)."""
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose2d expects 2-D input, got {x.data.shape}")

    def bwd(g):
        _acc(x, g.T)

    return _wrap(x.data.T.copy(), (x,), bwd, "transpose2d")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape to a new layout (materialized copy)."""
    shape = tuple(shape)

    def bwd(g):
        _acc(x, g.reshape(x.data.shape))

    return _wrap(x.data.reshape(shape).copy(), (x,), bwd, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along one axis."""
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        s = list(t.data.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeMismatchError(
                f"concat: shape {t.data.shape} incompatible with {tensors[0].data.shape} off axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])

    return _wrap(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "concat")


def crop(x: Tensor, row: int, col: int, h: int, w: int) -> Tensor:
    """Crop a (h, w) window from the last two axes at integer offsets.

    Offsets are non-differentiable; gradient flows into the cropped region
    of ``x`` only.
    """
    H, W = x.data.shape[-2], x.data.shape[-1]
    if row < 0 or col < 0 or h < 1 or w < 1 or row + h > H or col + w > W:
        raise CropBoundsError(
            f"crop region (row={row}, col={col}, h={h}, w={w}) outside tensor extent {H}x{W}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[..., row:row + h, col:col + w] = g
        _acc(x, gx)

    return _wrap(x.data[..., row:row + h, col:col + w].copy(), (x,), bwd, "crop")


def crop_batch(x: Tensor, locs: Sequence[tuple[int, int]], size: int) -> Tensor:
    """Gather square (size x size) windows of a (1, C, H, W) map into one
    (P, C, size, size) batch; gradient scatter-adds back into ``x``."""
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise ShapeMismatchError(f"crop_batch expects a (1, C, H, W) map, got {x.data.shape}")
    H, W = x.data.shape[-2], x.data.shape[-1]
    for r, c in locs:
        if r < 0 or c < 0 or r + size > H or c + size > W:
            raise CropBoundsError(
                f"crop region (row={r}, col={c}, h={size}, w={size}) outside tensor extent {H}x{W}")
    out_data = np.stack([x.data[0, :, r:r + size, c:c + size] for r, c in locs])

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i, (r, c) in enumerate(locs):
            gx[0, :, r:r + size, c:c + size] += g[i]
        _acc(x, gx)

    return _wrap(out_data, (x,), bwd, "crop_batch")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the last two axes by an integer factor."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        def bwd_id(g):
            _acc(x, g)

        return _wrap(x.data.copy(), (x,), bwd_id, "upsample_nearest")
    out_data = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def bwd(g):
        lead = g.shape[:-2]
        H, W = x.data.shape[-2], x.data.shape[-1]
        gr = g.reshape(lead + (H, factor, W, factor))
        _acc(x, gr.sum(axis=(-3, -1)))

    return _wrap(out_data, (x,), bwd, "upsample_nearest")


# ---------------------------------------------------------------------------
# Convolution and pooling


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold NCHW into (N, C*kh*kw, oh*ow) patch columns."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    H, W = x.shape[2], x.shape[3]
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    s = x.strides
    cols = as_strided(
        x, (n, c, kh, kw, oh, ow), (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    return np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            oh: int, ow: int) -> np.ndarray:
    """Fold patch columns back, accumulating overlaps (adjoint of _im2col)."""
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        hi = i + stride * oh
        for j in range(kw):
            wj = j + stride * ow
            gx[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), input NCHW, weight OIHW, bias O.

    Output spatial size follows floor((H + 2*padding - kH)/stride) + 1.
    Gradients are defined w.r.t. input, weight, and bias.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects NCHW input and OIHW weight, got {x.data.shape} and {weight.data.shape}")
    n, c, h, w = x.data.shape
    o, i, kh, kw = weight.data.shape
    if c != i:
        raise ShapeMismatchError(
            f"conv2d: input channel axis (C={c}) does not match weight input axis (I={i})")
    if bias.data.shape != (o,):
        raise ShapeMismatchError(
            f"conv2d: bias shape {bias.data.shape} does not match out-channel axis (O={o})")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatchError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(o, -1)
    out_data = (w2 @ cols).reshape(n, o, oh, ow) + bias.data[:, None, None]

    def bwd(g):
        g2 = g.reshape(n, o, oh * ow)
        _acc(bias, g2.sum(axis=(0, 2)))
        # im2col is recomputed rather than cached so forward retention stays
        # limited to the logical activation tensors.
        cols_b, _, _ = _im2col(x.data, kh, kw, stride, padding)
        gw = np.einsum("nol,nkl->ok", g2, cols_b, optimize=True)
        _acc(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            _acc(x, _col2im(gcols, x.data.shape, kh, kw, stride, padding, oh, ow))

    return _wrap(out_data, (x, weight, bias), bwd, "conv2d")


def maxpool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping kernel x kernel max pooling over NCHW; H, W must divide."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"maxpool2d expects NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % kernel or w % kernel:
        raise ShapeMismatchError(
            f"maxpool2d: spatial axes {h}x{w} not divisible by kernel {kernel}")
    oh, ow = h // kernel, w // kernel
    win = x.data.reshape(n, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, kernel * kernel)
    idx = np.argmax(win, axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gwin = np.zeros((n, c, oh, ow, kernel * kernel))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        _acc(x, gx.reshape(n, c, h, w))

    return _wrap(out_data, (x,), bwd, "maxpool2d")


def adaptive_avgpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool NCHW spatial axes down to an (out_h, out_w) grid.

    Bins split the axes as evenly as integer boundaries allow; gradient
    spreads uniformly within each bin.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"adaptive_avgpool2d expects NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if out_h > h or out_w > w:
        raise ShapeMismatchError(
            f"adaptive_avgpool2d: target grid {out_h}x{out_w} exceeds input {h}x{w}")
    hb = [(h * i) // out_h for i in range(out_h + 1)]
    wb = [(w * j) // out_w for j in range(out_w + 1)]
    out_data = np.empty((n, c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out_data[:, :, i, j] = x.data[:, :, hb[i]:hb[i + 1], wb[j]:wb[j + 1]].mean(axis=(2, 3))

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                area = (hb[i + 1] - hb[i]) * (wb[j + 1] - wb[j])
                gx[:, :, hb[i]:hb[i + 1], wb[j]:wb[j + 1]] += g[:, :, i, j, None, None] / area
        _acc(x, gx)

    return _wrap(out_data, (x,), bwd, "adaptive_avgpool2d")


# ---------------------------------------------------------------------------
# Losses


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under softmax(logits), 1-D logits."""
    if logits.data.ndim != 1 or logits.data.shape[0] < 2:
        raise ShapeMismatchError(f"cross_entropy expects >= 2 class logits, got {logits.data.shape}")
    label = int(label)
    if not 0 <= label < logits.data.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.data.shape[0]} classes")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    out_data = np.asarray(lse - z[label])
    probs = np.exp(z - lse)

    def bwd(g):
        gl = probs.copy()
        gl[label] -= 1.0
        _acc(logits, gl * float(g))

    return _wrap(out_data, (logits,), bwd, "cross_entropy")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; target is a constant (no gradient flows in).

    The subgradient at equality is fixed to 0, making l1_loss(x, x) a
    stationary point.
    """
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(
            f"l1_loss: pred shape {pred.data.shape} != target shape {target.data.shape}")
    diff = pred.data - target.data
    out_data = np.asarray(np.abs(diff).mean())
    n = pred.data.size

    def bwd(g):
        _acc(pred, np.sign(diff) * (float(g) / n))

    return _wrap(out_data, (pred, target), bwd, "l1_loss")


# ---------------------------------------------------------------------------
# Finite-difference oracle


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f() w.r.t. x, elementwise.

    Independent of the backward pass: every evaluation reruns the forward
    computation with one perturbed entry.
    """
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return g


def gradient_check(f: Callable[[], Tensor], wrt: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``f`` must rebuild the forward computation from the ``wrt`` tensors on
    each call. Relative error is |a - n| / max(1, |a|, |n|) per element.
    """
    for t in wrt:
        t.zero_grad()
    with Graph():
        loss = f()
        backward(loss)
    worst = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(f, t, step=step)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float(np.max(np.abs(analytic - numeric) / denom)) if t.data.size else 0.0
        worst = max(worst, err)
    return worst
