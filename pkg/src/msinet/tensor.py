"""Minimal dense tensor engine with reverse-mode gradients.

Only the operations needed by the saliency network are provided. Activations
use the ``(batch, channels, rows, cols)`` layout and convolution weights use
``(out_channels, in_channels, kernel_rows, kernel_cols)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphCycleError(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs, parameters and local backward rule."""

    op: str
    inputs: tuple["Tensor", ...]
    params: dict = field(default_factory=dict)
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn, **params) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), params, backward_fn)
    return out


# --- graph traversal -------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered operation nodes reachable from an output tensor."""

    nodes: list[Node]
    tensors: list[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = finished
        stack: list[tuple[Tensor, int]] = [(output, 0)]
        while stack:
            t, i = stack.pop()
            key = id(t)
            if i == 0:
                if state.get(key) == 2:
                    continue
                if state.get(key) == 1:
                    raise GraphCycleError("cycle detected in computation graph")
                state[key] = 1
            inputs = t.node.inputs if t.node is not None else ()
            if i < len(inputs):
                stack.append((t, i + 1))
                child = inputs[i]
                if state.get(id(child)) == 1:
                    raise GraphCycleError("cycle detected in computation graph")
                if state.get(id(child)) != 2 and child.requires_grad:
                    stack.append((child, 0))
            else:
                state[key] = 2
                order.append(t)
        return cls([t.node for t in order if t.node is not None], order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with ``requires_grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi


# --- elementwise helpers -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _make(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def power(a: Tensor, exponent: float) -> Tensor:
    return _make(
        a.data**exponent, (a,), "pow",
        lambda g: (g * exponent * a.data ** (exponent - 1),), exponent=exponent,
    )


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.sum(a.data, keepdims=False).reshape(()), (a,), "sum",
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu",
                 lambda g: (np.where(mask, g, 0).astype(g.dtype),))


# --- convolution -------------------------------------------------------------


def same_padding(extent: int, kernel: int, dilation: int = 1) -> tuple[int, int]:
    total = dilation * (kernel - 1)
    return total // 2, total - total // 2


def _check_4d(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-d tensor, got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, dilation: int = 1) -> Tensor:
    """Same-padded 2-d cross-correlation with optional stride and dilation."""
    _check_4d("conv2d input", x)
    _check_4d("conv2d weight", weight)
    if stride < 1 or dilation < 1:
        raise ValueError("conv2d: stride and dilation must be positive")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d: in_channels mismatch, input has {C} but weight expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: out_channels mismatch, bias shape {bias.shape} vs {O} filters")

    pt, pb = same_padding(H, kh, dilation)
    pl, pr = same_padding(W, kw, dilation)
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    w = weight.data
    dtype = np.result_type(x.data, w)

    if kh == 1 and kw == 1 and stride == 1:
        flat = x.data.reshape(B, C, H * W)
        out = np.einsum("oc,bcp->bop", w.reshape(O, C), flat, optimize=True).reshape(B, O, H, W)
        cols = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        sB, sC, sH, sW = xp.strides
        cols = as_strided(
            xp, shape=(B, C, kh, kw, Ho, Wo),
            strides=(sB, sC, sH * dilation, sW * dilation, sH * stride, sW * stride),
            writeable=False,
        )
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out, dtype=dtype)

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if cols is None:
            gflat = g.reshape(B, O, H * W)
            gw = np.einsum("bop,bcp->oc", gflat, x.data.reshape(B, C, H * W), optimize=True)
            gw = gw.reshape(O, C, 1, 1)
            gx = np.einsum("oc,bop->bcp", w.reshape(O, C), gflat, optimize=True).reshape(B, C, H, W)
            return gx, gw, gb
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(w, g, axes=([0], [1]))  # C, kh, kw, B, Ho, Wo
            gxp = np.zeros((B, C, H + pt + pb, W + pl + pr), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride,
                        c0:c0 + stride * (Wo - 1) + 1:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, pt:pt + H, pl:pl + W]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, "conv2d", backward_fn, stride=stride, dilation=dilation,
                 padding=(pt, pb, pl, pr))


# --- pooling -----------------------------------------------------------------


def max_pool(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Same-padded max pooling. Ties send the gradient to the first tap in row-major order."""
    _check_4d("max_pool input", x)
    B, C, H, W = x.shape
    if H < window or W < window:
        raise ShapeError(f"max_pool: window {window} exceeds spatial extent {H}x{W}")
    Ho, Wo = -(-H // stride), -(-W // stride)
    ph = max((Ho - 1) * stride + window - H, 0)
    pw = max((Wo - 1) * stride + window - W, 0)
    pt, pl = ph // 2, pw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, ph - pt), (pl, pw - pl)), constant_values=-np.inf)
    sB, sC, sH, sW = xp.strides
    win = as_strided(xp, shape=(B, C, Ho, Wo, window, window),
                     strides=(sB, sC, sH * stride, sW * stride, sH, sW), writeable=False)
    win = win.reshape(B, C, Ho, Wo, window * window)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for t in range(window * window):
            i, j = divmod(t, window)
            gxp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                j:j + stride * (Wo - 1) + 1:stride] += np.where(arg == t, g, 0)
        return (gxp[:, :, pt:pt + H, pl:pl + W],)

    return _make(np.ascontiguousarray(out), (x,), "max_pool", backward_fn,
                 window=window, stride=stride)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d("global_avg_pool input", x)
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, (x,), "global_avg_pool",
                 lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),))


def broadcast_spatial(x: Tensor, rows: int, cols: int) -> Tensor:
    """Repeat a ``(B, C, 1, 1)`` tensor over a ``rows x cols`` grid."""
    if x.data.ndim != 4 or x.shape[2:] != (1, 1):
        raise ShapeError(f"broadcast_spatial: expected (B, C, 1, 1), got {x.shape}")
    out = np.broadcast_to(x.data, x.shape[:2] + (rows, cols)).copy()
    return _make(out, (x,), "broadcast_spatial",
                 lambda g: (g.sum(axis=(2, 3), keepdims=True),), rows=rows, cols=cols)


# --- resampling --------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (n_out x n_in) using half-pixel centers and edge clamping."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    _check_4d("bilinear_upsample_x2 input", x)
    B, C, H, W = x.shape
    uh = interp_matrix(H, 2 * H, x.dtype)
    uw = interp_matrix(W, 2 * W, x.dtype)
    out = np.einsum("yh,bchw,xw->bcyx", uh, x.data, uw, optimize=True)

    def backward_fn(g):
        return (np.einsum("yh,bcyx,xw->bchw", uh, g, uw, optimize=True),)

    return _make(np.ascontiguousarray(out), (x,), "bilinear_upsample_x2", backward_fn)


# --- channel plumbing --------------------------------------------------------


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels: no inputs")
    ref = inputs[0].shape
    for i, t in enumerate(inputs):
        _check_4d(f"concat_channels input {i}", t)
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            shapes = ", ".join(f"#{k}={s.shape}" for k, s in enumerate(inputs))
            raise ShapeError(
                f"concat_channels: input #{i} has shape {t.shape}, incompatible with "
                f"input #0 {ref} (inputs: {shapes})"
            )
    sizes = [t.shape[1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(inputs)))

    return _make(out, tuple(inputs), "concat_channels", backward_fn, sizes=tuple(sizes))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d("slice_channels input", x)

    def backward_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), "slice_channels", backward_fn,
                 start=start, stop=stop)


# --- distributions -----------------------------------------------------------


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the spatial positions of each (batch, channel) map."""
    _check_4d("spatial_softmax input", x)
    B, C, H, W = x.shape
    flat = x.data.reshape(B, C, H * W)
    z = np.exp(flat - flat.max(axis=-1, keepdims=True))
    p = (z / z.sum(axis=-1, keepdims=True)).reshape(x.shape)

    def backward_fn(g):
        inner = (g * p).sum(axis=(2, 3), keepdims=True)
        return (p * (g - inner),)

    return _make(p, (x,), "spatial_softmax", backward_fn)
