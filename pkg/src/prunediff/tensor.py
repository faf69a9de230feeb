"""Minimal dense tensor engine with tape-based reverse-mode autodiff.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and at
least one input requires a gradient, the operation appends a node to the tape
together with a closure computing the vector-Jacobian product. Because nodes
are appended in execution order, walking the tape backwards is a valid
topological order and every node is visited exactly once.

Outside of a tape nothing is recorded, which is how inference and sampling
run without building a graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2

_TAPES: list["Tape"] = []
_FLOP_COUNTERS: list["FlopCounter"] = []


class Tensor:
    """A dense float array plus optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"tensor {self.name or ''} shape={self.shape} contains NaN/Inf")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr, dtype=dtype or (arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32))


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        backprop(self, loss)


def backprop(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Parameters that do not influence ``loss`` keep ``grad=None``; callers treat
    that as a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
        # intermediates are not needed past this point
        node.grad = None if node is not loss else node.grad
        node._backward = None
        node._parents = ()
    tape.nodes.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or not g.flags.writeable else g
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope).astype(x.data.dtype)

    def bw(g):
        _accumulate(x, g * factor)

    return _make(x.data * factor, (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accumulate(x, 2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    def bw(g):
        _accumulate(x, np.broadcast_to(g.reshape(()), x.shape).astype(x.data.dtype))

    return _make(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        _accumulate(x, np.full(x.shape, g.reshape(()) / n, dtype=x.data.dtype))

    return _make(np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype), (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape

    def bw(g):
        _accumulate(x, g.reshape(orig))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(x, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of a (B, C, H, W) tensor."""
    b, c, h, w = x.shape

    def bw(g):
        _accumulate(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)
    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


class FlopCounter:
    """Counts multiply-add FLOPs (x2) of conv2d and matmul executed in scope."""

    def __init__(self):
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        _FLOP_COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _FLOP_COUNTERS.remove(self)


def _count(n: int) -> None:
    for c in _FLOP_COUNTERS:
        c.flops += int(n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    out = np.matmul(a.data, b.data)
    _count(2 * out.size * a.shape[-1])

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x: (N, in), weight: (out, in). Not counted by :class:`FlopCounter`."""
    out = np.matmul(x.data, weight.data.T)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k * k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is (c_out, c_in, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c:
        raise ValueError(f"conv2d shape error: weight expects {c_in} input channels, input has {c} (input {x.shape})")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d requires square odd kernels, got {k}x{k2}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, k={k}, padding={padding}")

    wmat = weight.data.reshape(c_out, c_in * k * k)
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(b, c, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, c_out, ho, wo)
    _count(2 * c_in * c_out * k * k * ho * wo * b)

    def bw(g):
        g2 = g.reshape(b, c_out, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            if k == 1 and stride == 1 and padding == 0:
                _accumulate(x, np.matmul(wmat.T, g2).reshape(x.shape))
                return
            if stride == 1 and padding <= k - 1:
                # input gradient as a correlation of g with the flipped, transposed kernel
                q = k - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
                wt = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, c_out * k * k)
                _accumulate(x, np.matmul(wt, _im2col(gp, k, 1, h, w)).reshape(x.shape))
                return
            dcols = np.matmul(wmat.T, g2).reshape(b, c, k * k, ho, wo)
            dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i * k + j]
            _accumulate(x, dxp[:, :, padding:padding + h, padding:padding + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# softmax


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = _softmax_np(x.data, axis)

    def bw(g):
        _accumulate(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (x,), bw)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the channel axis of a (B, C, H, W) tensor."""
    if x.ndim != 4 or x.shape[1] < 1:
        raise ValueError(f"softmax_channel expects (B, C>=1, H, W), got {x.shape}")
    return softmax(x, axis=1)


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def no_tape():
    """Temporarily suspend recording (e.g. inside an optimizer step)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
