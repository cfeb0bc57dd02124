"""Dense rank-4 tensors with reverse-mode differentiation.

Every value flowing through the network is a :class:`Tensor` wrapping a numpy
array laid out as ``(batch, channels, height, width)``. Operations record a
closure that maps the output gradient to input gradients; :func:`backward`
replays them in reverse topological order.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, ParseError, UsageError

DUMP_MAGIC = b"IADMT1"
_HEADER = struct.Struct("<4I")

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def trace_pattern():
    """Record every ReLU mask and max-pool argmax computed in this thread.

    Yields the list the records are appended to; two forward passes took the same
    piecewise-linear branch exactly when their records are equal.
    """
    prev = getattr(_state, "trace", None)
    records: list[bytes] = []
    _state.trace = records
    try:
        yield records
    finally:
        _state.trace = prev


def _record(arr: np.ndarray) -> None:
    records = getattr(_state, "trace", None)
    if records is not None:
        records.append(arr.tobytes())


class Tensor:
    """A numpy array plus an optional gradient and the closure that produced it."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def zeros(shape: Sequence[int], dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward called before a differentiable forward pass was recorded")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise and structural ops


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        op = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}; expected add, sub or mul") from None
    return op(a, b)


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ConfigurationError("add_n needs at least one tensor")
    for x in xs[1:]:
        _check_same(xs[0], x, "add_n")
    total = xs[0].data.copy()
    for x in xs[1:]:
        total += x.data
    return _make(total, tuple(xs), lambda g: tuple(g for _ in xs))


def scale(x: Tensor, alpha: float) -> Tensor:
    return _make(x.data * alpha, (x,), lambda g: (g * alpha,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record(np.packbits(mask))
    # np.maximum lets NaN through so a poisoned input surfaces in the loss
    return _make(np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ConfigurationError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != 4 or (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ConfigurationError(f"concat_channels: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(out, tuple(xs), bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ConfigurationError(f"slice_channels: [{start}, {stop}) outside {x.shape[1]} channels")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop].copy(), (x,), bw)


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h`` x ``w`` window."""
    H, W = x.shape[2], x.shape[3]
    if h > H or w > W:
        raise ConfigurationError(f"crop: target {h}x{w} larger than source {H}x{W}")
    if (h, w) == (H, W):
        return x

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :h, :w] = g
        return (gx,)

    return _make(x.data[:, :, :h, :w].copy(), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _check_same(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    return _make(np.asarray(np.mean(diff * diff)), (pred, target),
                 lambda g: (g * 2.0 / n * diff, -g * 2.0 / n * diff))


# --------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """Weights and geometry for one 2-D cross-correlation layer."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    name: str = "conv"

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ConfigurationError(f"{self.name}: weight must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh < 1 or kw < 1:
            raise ConfigurationError(f"{self.name}: kernel must be at least 1x1")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ConfigurationError(
                f"{self.name}: stride/dilation must be >= 1 and padding >= 0 "
                f"(got {self.stride}, {self.dilation}, {self.padding})")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ConfigurationError(f"{self.name}: bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return oh, ow


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Zero-padded cross-correlation of ``x`` with ``p``."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"{p.name}: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ConfigurationError(f"{p.name}: input has {c} channels, layer expects {p.in_channels}")
    oh, ow = p.output_size(h, w)
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"{p.name}: input {h}x{w} too small, output would be {oh}x{ow}")

    o = p.out_channels
    kh, kw = p.kernel
    W = p.weight.data
    wmat = W.reshape(o, -1)

    if kh == 1 and kw == 1 and p.padding == 0 and p.stride == 1:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
        pad_shape = None
    else:
        pd, s, d = p.padding, p.stride, p.dilation
        xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (pd, pd))) if pd else np.ascontiguousarray(x.data)
        pad_shape = xp.shape
        st = xp.strides
        view = as_strided(xp, (c, kh, kw, n, oh, ow),
                          (st[1], st[2] * d, st[3] * d, st[0], st[2] * s, st[3] * s), writeable=False)
        cols = view.reshape(c * kh * kw, n * oh * ow)

    out = (wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(W.shape) if p.weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if p.bias is not None and p.bias.requires_grad else None
        gx = None
        if x.requires_grad:
            s, d, pd = p.stride, p.dilation, p.padding
            q = d * (kh - 1) - pd
            if pad_shape is None:
                gx = (wmat.T @ gmat).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            elif s == 1 and q >= 0 and d * (kw - 1) - pd == q:
                # stride 1: input gradient is a correlation of the padded g with the flipped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else np.ascontiguousarray(g)
                gs = gp.strides
                gview = as_strided(gp, (o, kh, kw, n, h, w), (gs[1], gs[2] * d, gs[3] * d, gs[0], gs[2], gs[3]),
                                   writeable=False)
                wflip = W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gx = (wflip @ gview.reshape(o * kh * kw, -1)).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                gcols = wmat.T @ gmat
                # one transpose up front so each scatter reads a contiguous block
                gcols = np.ascontiguousarray(gcols.reshape(c, kh, kw, n, oh, ow).transpose(1, 2, 3, 0, 4, 5))
                gxp = np.zeros(pad_shape, dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i * d:i * d + s * (oh - 1) + 1:s, j * d:j * d + s * (ow - 1) + 1:s] += gcols[i, j]
                gx = gxp[:, :, pd:pd + h, pd:pd + w] if pd else gxp
        return (gx, gw) if p.bias is None else (gx, gw, gb)

    return _make(out, (x, *p.parameters()), bw)


# --------------------------------------------------------------------------
# pooling and resampling


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling with right/bottom replicate padding.

    Output size is ``ceil(h / window) x ceil(w / window)``. The gradient of each
    cell goes to the first maximal element in row-major order of its window.
    """
    if not isinstance(window, (int, np.integer)) or window <= 0:
        raise ConfigurationError(f"maxpool2d: window must be a positive integer, got {window!r}")
    if window == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    k = int(window)
    oh, ow = -(-h // k), -(-w // k)
    Hp, Wp = oh * k, ow * k
    xp = x.data
    if Hp != h or Wp != w:
        xp = xp[:, :, np.minimum(np.arange(Hp), h - 1)][:, :, :, np.minimum(np.arange(Wp), w - 1)]
    win = xp.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)[..., None]
    _record(arg)
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros((n, c, oh, ow, k * k), dtype=x.dtype)
        np.put_along_axis(gwin, arg, g[..., None], axis=-1)
        gp = gwin.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, Hp, Wp)
        gx = gp[:, :, :h, :w].copy()
        if Hp > h:
            gx[:, :, h - 1, :] += gp[:, :, h:, :w].sum(axis=2)
        if Wp > w:
            gx[:, :, :, w - 1] += gp[:, :, :h, w:].sum(axis=3)
        if Hp > h and Wp > w:
            gx[:, :, h - 1, w - 1] += gp[:, :, h:, w:].sum(axis=(2, 3))
        return (gx,)

    return _make(out, (x,), bw)


def upsample_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Replicate each pixel into an integer-sized block."""
    n, c, h, w = x.shape
    if target_h < h or target_w < w or target_h % h or target_w % w:
        raise ConfigurationError(
            f"upsample_nearest: {h}x{w} -> {target_h}x{target_w} is not an integer upscale")
    sh, sw = target_h // h, target_w // w
    if sh == 1 and sw == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    out = np.repeat(np.repeat(x.data, sh, axis=2), sw, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, sh, w, sw).sum(axis=(3, 5)),))


# --------------------------------------------------------------------------
# binary dumps


def dumps(t: Tensor | np.ndarray) -> bytes:
    """Serialize as magic, four little-endian uint32 dims, then float64 data."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4:
        raise ConfigurationError(f"tensor dumps need rank 4, got shape {arr.shape}")
    return DUMP_MAGIC + _HEADER.pack(*arr.shape) + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def loads(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one dump starting at ``offset``; returns the tensor and the next offset."""
    end = offset + len(DUMP_MAGIC)
    if buf[offset:end] != DUMP_MAGIC:
        raise ParseError(f"bad tensor magic at byte {offset}")
    if len(buf) < end + _HEADER.size:
        raise ParseError(f"truncated tensor header at byte {offset}")
    dims = _HEADER.unpack_from(buf, end)
    start = end + _HEADER.size
    count = int(np.prod(dims))
    stop = start + 8 * count
    if len(buf) < stop:
        raise ParseError(f"truncated tensor data at byte {start}: need {8 * count} bytes")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(dims).astype(np.float64)
    return Tensor(arr), stop


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(dumps(t))


def load_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = loads(buf)
    if end != len(buf):
        raise ParseError(f"{len(buf) - end} trailing bytes after tensor", path=path)
    return t


def parameters_of(items: Iterable) -> list[Tensor]:
    """Flatten objects exposing ``parameters()`` into one list."""
    out: list[Tensor] = []
    for item in items:
        out.extend(item.parameters())
    return out


def init_conv(rng: np.random.Generator, out_channels: int, in_channels: int, kernel: int = 1, *,
              std: float = 1e-2, padding: int = 0, dilation: int = 1, bias: bool = True,
              name: str = "conv", dtype=np.float64) -> ConvParams:
    """Gaussian(0, std) weights, zero bias."""
    if out_channels < 1 or in_channels < 1:
        raise ConfigurationError(f"{name}: channel counts must be >= 1, got {out_channels}x{in_channels}")
    w = rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel)).astype(dtype)
    b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True, name=f"{name}.bias") if bias else None
    return ConvParams(Tensor(w, requires_grad=True, name=f"{name}.weight"), b,
                      padding=padding, dilation=dilation, name=name)
