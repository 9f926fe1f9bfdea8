"""Dense float64 tensors with reverse-mode differentiation.

Only the operators the context-aware decoder needs are provided. Feature maps
are rank-4 ``(N, C, H, W)`` arrays; parameters (biases, BN affine terms) and
the scalar loss use whatever rank they naturally have.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""

    def __init__(self, op: str, dim: str, expected, got):
        super().__init__(f"{op}: {dim} mismatch (expected {expected}, got {got})")
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got


class NumericalError(FloatingPointError):
    pass


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate gradients from ``loss`` into every tensor that requires them.

    Gradients accumulate into ``.grad``; call ``zero_grad`` on leaves between
    steps. Non-leaf gradients are released once consumed.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError("backward", "loss size", 1, loss.data.size)
        grad = np.ones_like(loss.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    on_stack: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            on_stack.discard(id(node))
            order.append(node)
            continue
        if id(node) in seen:
            if id(node) in on_stack:
                raise RuntimeError("cycle in recorded computation")
            continue
        seen.add(id(node))
        on_stack.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"invalid ConvSpec {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        """Spatial extent of ``conv2d`` output for an ``h x w`` input."""
        ho = (h + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        return ho, wo

    def transposed_out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel_h - 1) + 1
        wo = (w - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel_w - 1) + 1
        return ho, wo


def deconv_spec(in_channels: int, out_channels: int) -> ConvSpec:
    """The fixed stride-2 transposed convolution: kernel 4, padding 1."""
    return ConvSpec(4, 4, in_channels, out_channels, stride=2, dilation=1, padding=1)


def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    # (N, C, kh, kw, ho, wo) view over the padded input
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, spec.kernel_h, spec.kernel_w, ho, wo),
        strides=(sn, sc, sh * spec.dilation, sw * spec.dilation, sh * spec.stride, sw * spec.stride),
        writeable=False,
    )
    return view.reshape(n, c * spec.kernel_h * spec.kernel_w, ho * wo)


def _col2im(cols: np.ndarray, spec: ConvSpec, c: int, h: int, w: int, ho: int, wo: int) -> np.ndarray:
    n = cols.shape[0]
    p, d, s = spec.padding, spec.dilation, spec.stride
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    cols = cols.reshape(n, c, spec.kernel_h, spec.kernel_w, ho, wo)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            out[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += cols[:, :, i, j]
    if p:
        out = out[:, :, p:-p, p:-p]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check_rank4(op: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(op, "rank", 4, t.data.ndim)


def _conv_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    n, c, h, wd = x.shape
    ho, wo = spec.out_size(h, wd)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "output extent", ">= 1", (ho, wo))
    cols = _im2col(_pad(x, spec.padding), spec, ho, wo)
    wm = w.reshape(spec.out_channels, -1)
    out = np.matmul(wm, cols).reshape(n, spec.out_channels, ho, wo)
    return out, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation with stride, dilation and zero padding.

    ``w`` has shape ``(out_channels, in_channels, kernel_h, kernel_w)``.
    """
    _check_rank4("conv2d", x)
    expected_w = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if w.shape != expected_w:
        raise ShapeError("conv2d", "weight shape", expected_w, w.shape)
    if x.shape[1] != spec.in_channels:
        raise ShapeError("conv2d", "input channels", spec.in_channels, x.shape[1])
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError("conv2d", "bias length", (spec.out_channels,), b.shape)

    n, c, h, wd = x.shape
    out, cols = _conv_forward(x.data, w.data, spec)
    ho, wo = out.shape[2:]
    if b is not None:
        out += b.data[None, :, None, None]
    wm = w.data.reshape(spec.out_channels, -1)

    def fn(g):
        g2 = g.reshape(n, spec.out_channels, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(np.matmul(wm.T, g2), spec, c, h, wd, ho, wo)
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, fn)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Transposed convolution, the adjoint of ``conv2d`` under ``spec``.

    ``w`` has shape ``(in_channels, out_channels, kernel_h, kernel_w)``, the
    layout of the forward convolution whose input-gradient this computes.
    """
    _check_rank4("deconv2d", x)
    expected_w = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    if w.shape != expected_w:
        raise ShapeError("deconv2d", "weight shape", expected_w, w.shape)
    if x.shape[1] != spec.in_channels:
        raise ShapeError("deconv2d", "input channels", spec.in_channels, x.shape[1])
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError("deconv2d", "bias length", (spec.out_channels,), b.shape)

    n, c, h, wd = x.shape
    ho, wo = spec.transposed_out_size(h, wd)
    # adjoint view: a conv from (out_channels, ho, wo) to (in_channels, h, wd)
    adj = ConvSpec(spec.kernel_h, spec.kernel_w, spec.out_channels, spec.in_channels,
                   spec.stride, spec.dilation, spec.padding)
    if adj.out_size(ho, wo) != (h, wd):
        raise ShapeError("deconv2d", "spatial extent", (h, wd), adj.out_size(ho, wo))
    wm = w.data.reshape(spec.in_channels, -1)
    x2 = x.data.reshape(n, c, h * wd)
    out = _col2im(np.matmul(wm.T, x2), adj, spec.out_channels, ho, wo, h, wd)
    if b is not None:
        out += b.data[None, :, None, None]

    def fn(g):
        cols = _im2col(_pad(g, spec.padding), adj, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wm, cols).reshape(x.shape)
        if w.requires_grad:
            gw = np.tensordot(x2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, fn)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization followed by the affine map.

    In ``train`` mode the batch statistics are used and the running state is
    updated in place (unbiased variance); ``infer`` mode reads the state.
    """
    _check_rank4("batch_norm", x)
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data),
                       ("running_mean", state.running_mean), ("running_var", state.running_var)):
        if arr.shape != (c,):
            raise ShapeError("batch_norm", f"{label} length", c, arr.shape)
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    xd = x.data
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if mode == "train":
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise NumericalError("batch_norm: non-finite batch statistics")
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean *= 1.0 - state.momentum
        state.running_mean += state.momentum * mean
        state.running_var *= 1.0 - state.momentum
        state.running_var += state.momentum * unbiased
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def fn(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                gx = (inv[None, :, None, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _result(out, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# elementwise and structural ops


# set to a list to record every ReLU activation pattern (finite-difference kink checks)
relu_patterns: list | None = None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if relu_patterns is not None:
        relu_patterns.append(np.packbits(mask).tobytes())
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "shape", a.shape, b.shape)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Left-to-right elementwise sum."""
    if not parts:
        raise ValueError("add_n: empty list")
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return total


def scale(x: Tensor, k: float) -> Tensor:
    return _result(x.data * k, (x,), lambda g: (g * k,))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank4("global_avg_pool", x)
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("global_avg_pool", "spatial plane", "non-empty", (h, w))
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape),))


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every spatial location of channel ``c`` by ``s[n, c]``."""
    _check_rank4("channel_scale", x)
    n, c = x.shape[:2]
    if s.shape != (n, c, 1, 1):
        dim = "batch" if s.shape[:1] != (n,) else "channels"
        raise ShapeError("channel_scale", dim, (n, c, 1, 1), s.shape)
    out = x.data * s.data

    def fn(g):
        gx = g * s.data if x.requires_grad else None
        gs = (g * x.data).sum(axis=(2, 3), keepdims=True) if s.requires_grad else None
        return gx, gs

    return _result(out, (x, s), fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels: empty list")
    for p in parts:
        _check_rank4("concat_channels", p)
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != n:
            raise ShapeError("concat_channels", "batch", n, p.shape[0])
        if p.shape[2:] != (h, w):
            raise ShapeError("concat_channels", "spatial", (h, w), p.shape[2:])
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result(out, tuple(parts), fn)


def upsample2x_nearest(x: Tensor) -> Tensor:
    _check_rank4("upsample2x_nearest", x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), fn)


def weighted_mse(pred: Tensor, target, weights) -> Tensor:
    """Mean over all elements of ``w * (pred - target)**2``.

    ``weights`` holds one value per ``(instance, joint)`` and is broadcast over
    the spatial extent.
    """
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError("weighted_mse", "target shape", pred.shape, target.shape)
    if weights.shape != pred.shape[:2]:
        raise ShapeError("weighted_mse", "weights shape", pred.shape[:2], weights.shape)
    wb = weights[:, :, None, None]
    diff = pred.data - target
    count = pred.data.size
    out = np.asarray((wb * diff * diff).sum() / count)
    return _result(out, (pred,), lambda g: (g * 2.0 * wb * diff / count,))


# ---------------------------------------------------------------------------
# parameter checkpoint container


def serialize_array(arr: np.ndarray) -> bytes:
    """Four little-endian uint64 extents followed by row-major float64 values.

    Arrays of lower rank are left-padded with unit extents.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 4:
        raise ShapeError("serialize", "rank", "<= 4", arr.ndim)
    shape = (1,) * (4 - arr.ndim) + arr.shape
    return struct.pack("<4Q", *shape) + np.ascontiguousarray(arr).astype("<f8").tobytes()


def deserialize_array(buf: bytes) -> np.ndarray:
    if len(buf) < 32:
        raise ValueError("tensor container truncated: missing shape header")
    shape = struct.unpack("<4Q", buf[:32])
    count = int(np.prod(shape))
    body = buf[32:]
    if len(body) != 8 * count:
        raise ValueError(f"tensor container holds {len(body)} payload bytes, expected {8 * count}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)


def save_array(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(serialize_array(arr))


def load_array(path: str | Path, shape: Sequence[int] | None = None) -> np.ndarray:
    arr = deserialize_array(Path(path).read_bytes())
    return arr.reshape(shape) if shape is not None else arr


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                   indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``arr`` (mutated in place).

    Entries not listed in ``indices`` are left as zero.
    """
    g = np.zeros_like(arr)
    if indices is None:
        indices = np.ndindex(*arr.shape)
    for idx in indices:
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def smooth_stencil(f: Callable[[], float], arr: np.ndarray, idx, h: float = 1e-5) -> bool:
    """True when no ReLU changes state between ``arr[idx] - h`` and ``arr[idx] + h``.

    Central differences are only meaningful on such stencils.
    """
    global relu_patterns
    orig = arr[idx]
    patterns = []
    try:
        for value in (orig - h, orig, orig + h):
            relu_patterns = []
            arr[idx] = value
            f()
            patterns.append(tuple(relu_patterns))
    finally:
        arr[idx] = orig
        relu_patterns = None
    return patterns[0] == patterns[1] == patterns[2]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den == 0.0:
        return 0.0
    return float(num / den)
