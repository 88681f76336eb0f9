"""Dense float64 arrays with reverse-mode differentiation.

Only the operators the temporal U-Net needs are provided. Every op takes and
returns :class:`Tensor`; a result remembers its inputs and a closure mapping
the output gradient to input gradients. :func:`backward` replays that record
in reverse topological order.

Shapes are explicit. The only broadcasting is adding a per-channel bias (or a
per-sample, per-channel embedding) along the temporal axis.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. while sampling from frozen weights."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs before consumers.

    Reversing the list gives an order in which every node is visited after all
    of its consumers, which is what gradient accumulation requires.
    """
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError("backward() needs a scalar loss", shape=loss.shape)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(build_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ", left=a.shape, right=b.shape)


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    # tanh(log1p(e^x)) = n / (n + 2) with n = e^x (e^x + 2); clip keeps e^2x finite
    ex = np.exp(np.minimum(x.data, 20.0))
    n = ex * (ex + 2.0)
    t = n / (n + 2.0)
    sig = ex / (1.0 + ex)

    def fn(g):
        return (g * (t + x.data * (1.0 - t * t) * sig),)

    return _result(x.data * t, (x,), fn)


# -- broadcasting adds -----------------------------------------------------

def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b[C]`` to ``x[B, C]`` or ``x[B, C, L]``."""
    if x.ndim not in (2, 3) or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias: bias must match channel axis", x=x.shape, bias=b.shape)
    if x.ndim == 2:
        return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))
    return _result(x.data + b.data[None, :, None], (x, b), lambda g: (g, g.sum(axis=(0, 2))))


def add_channelwise(x: Tensor, e: Tensor) -> Tensor:
    """Add ``e[B, C]`` to every timestep of ``x[B, C, L]``."""
    if x.ndim != 3 or e.shape != x.shape[:2]:
        raise ShapeError("add_channelwise: need x[B,C,L] and e[B,C]", x=x.shape, e=e.shape)
    return _result(x.data + e.data[:, :, None], (x, e), lambda g: (g, g.sum(axis=2)))


# -- shape ops ---------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    ref = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(ref) or any(o != r for k, (o, r) in enumerate(zip(other, ref)) if k != axis):
            raise ShapeError("concat: non-concatenated axes differ", shapes=[t.shape for t in tensors])
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate(datas, axis=axis), tuple(tensors), fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def repeat_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    b, c, n = x.shape

    def fn(g):
        return (g.reshape(b, c, n, factor).sum(axis=3),)

    return _result(np.repeat(x.data, factor, axis=2), (x,), fn)


# -- reductions --------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g.item()),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g.item() / n),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _result(x.data.mean(axis=axis), (x,), fn)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    _check_same(pred, target, "mse")
    return mean_all(square(sub(pred, target)))


def sum_squares_per_sample(pred: Tensor, target: Tensor) -> Tensor:
    """``mean_b ||pred_b - target_b||^2``: squared error summed within a sample, averaged over the batch."""
    _check_same(pred, target, "sum_squares_per_sample")
    return scale(sum_all(square(sub(pred, target))), 1.0 / pred.shape[0])


# -- layers ------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear: input/weight mismatch", x=x.shape, weight=weight.shape)
    out = _result(x.data @ weight.data.T, (x, weight), lambda g: (g @ weight.data, g.T @ x.data))
    return out if bias is None else add_bias(out, bias)


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (p, p)))
    if mode == "edge":
        return np.pad(x, ((0, 0), (0, 0), (p, p)), mode="edge")
    raise ValueError(f"unknown pad mode {mode!r}")


def _unpad_grad(gp: np.ndarray, p: int, length: int, mode: str) -> np.ndarray:
    if p == 0:
        return gp
    g = gp[:, :, p:p + length].copy()
    if mode == "edge":
        g[:, :, 0] += gp[:, :, :p].sum(axis=2)
        g[:, :, -1] += gp[:, :, p + length:].sum(axis=2)
    return g


def conv1d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    stride: int = 1,
    pad_mode: str = "zeros",
) -> Tensor:
    """Cross-correlation of ``x[B, Cin, L]`` with ``kernel[Cout, Cin, k]``.

    ``padding=(k-1)//2`` with odd ``k`` and ``stride=1`` keeps the length.
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError("conv1d: need x[B,Cin,L] and kernel[Cout,Cin,k]", x=x.shape, kernel=kernel.shape)
    bsz, cin, length = x.shape
    cout, kcin, k = kernel.shape
    if kcin != cin:
        raise ShapeError("conv1d: kernel input channels differ from input", x=x.shape, kernel=kernel.shape)
    xp = _pad(x.data, padding, pad_mode)
    lp = length + 2 * padding
    lout = (lp - k) // stride + 1
    if lout < 1:
        raise ShapeError("conv1d: kernel longer than padded input", length=length, k=k)
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :][:, :, :lout, :]
    cols = windows.transpose(0, 2, 1, 3).reshape(bsz * lout, cin * k)
    w2 = kernel.data.reshape(cout, cin * k)
    out = (cols @ w2.T).reshape(bsz, lout, cout).transpose(0, 2, 1)

    def fn(g):
        g2 = g.transpose(0, 2, 1).reshape(bsz * lout, cout)
        dk = (g2.T @ cols).reshape(cout, cin, k)
        dx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation of g with the flipped, transposed kernel
                gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
                gcols = sliding_window_view(gp, k, axis=2).transpose(0, 2, 1, 3).reshape(bsz * lp, cout * k)
                wflip = kernel.data[:, :, ::-1].transpose(1, 0, 2).reshape(cin, cout * k)
                dxp = (gcols @ wflip.T).reshape(bsz, lp, cin).transpose(0, 2, 1)
            else:
                dcols = (g2 @ w2).reshape(bsz, lout, cin, k).transpose(0, 2, 1, 3)
                dxp = np.zeros((bsz, cin, lp))
                span = stride * (lout - 1) + 1
                for j in range(k):
                    dxp[:, :, j:j + span:stride] += dcols[:, :, :, j]
            dx = _unpad_grad(dxp, padding, length, pad_mode)
        return dx, dk

    res = _result(np.ascontiguousarray(out), (x, kernel), fn)
    return res if bias is None else add_bias(res, bias)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel group) over its channels and timesteps."""
    if x.ndim != 3:
        raise ShapeError("group_norm: need x[B,C,L]", x=x.shape)
    bsz, ch, length = x.shape
    if groups < 1 or ch % groups:
        raise ShapeError("group_norm: groups must divide channels", channels=ch, groups=groups)
    if gain.shape != (ch,) or bias.shape != (ch,):
        raise ShapeError("group_norm: gain/bias must be [C]", gain=gain.shape, bias=bias.shape)
    xg = x.data.reshape(bsz, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=2, keepdims=True) + eps)
    xhat = (centered * inv_std).reshape(bsz, ch, length)
    out = xhat * gain.data[None, :, None] + bias.data[None, :, None]
    # bias and gain are folded into this node rather than chained through add_bias
    def fn(g):
        dgain = (g * xhat).sum(axis=(0, 2))
        dbias = g.sum(axis=(0, 2))
        dx = None
        if x.requires_grad:
            dxhat = (g * gain.data[None, :, None]).reshape(bsz, groups, -1)
            xh = xhat.reshape(bsz, groups, -1)
            dx = inv_std * (
                dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True)
            )
            dx = dx.reshape(bsz, ch, length)
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), fn)


def downsample(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Halve the temporal length with a stride-2 convolution (edge padded)."""
    if x.ndim != 3 or x.shape[2] % 2:
        raise ShapeError("downsample: temporal length must be even", x=x.shape)
    k = kernel.shape[2]
    return conv1d(x, kernel, bias, padding=(k - 1) // 2, stride=2, pad_mode="edge")


def upsample(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Double the temporal length: nearest-neighbour repeat, then a same-length convolution."""
    k = kernel.shape[2]
    return conv1d(repeat_nearest(x, 2), kernel, bias, padding=(k - 1) // 2, pad_mode="edge")
