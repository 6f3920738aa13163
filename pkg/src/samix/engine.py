"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the active tape of the
calling thread when any of its inputs requires a gradient. ``backward``
walks the tape in exact reverse recording order, accumulates gradients and
clears the tape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class DimensionError(ValueError):
    """Shape mismatch for an operation."""

    def __init__(self, op: str, axes, detail: str = ""):
        self.op = op
        self.axes = axes
        msg = f"{op}: incompatible extents on axes {axes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value produced by op '{op}'")


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: "Tensor") -> bool:
        return any(n.output is tensor for n in self.nodes)


class _Local(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.faults: dict[str, float] = {}


_local = _Local()


def current_tape() -> Tape:
    return _local.tape


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    prev = _local.tape
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def grad_enabled() -> bool:
    return _local.grad_enabled


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale every gradient produced by ``op``'s backward."""
    _local.faults[op] = factor
    try:
        yield
    finally:
        _local.faults.pop(op, None)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """A dense float64 array that can take part in gradient recording."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Stop-gradient marker: same values, no path back to ``self``."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.name = self.name
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only supported by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = _local.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _local.tape.record(Node(op, tuple(inputs), out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _local.tape
    if not loss.requires_grad:
        raise ContractError("loss is not on an active tape (no input requires grad)")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    faults = _local.faults
    try:
        for node in reversed(tape.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            factor = faults.get(node.op)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if factor is not None:
                    gi = gi * factor
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=DTYPE).reshape(inp.shape)
                else:
                    inp.grad = inp.grad + gi
    finally:
        tape.clear()


def check_finite(tape: Tape) -> None:
    for node in tape.nodes:
        if not np.all(np.isfinite(node.output.data)):
            raise NonFiniteError(node.op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        axes = [
            i
            for i, (x, y) in enumerate(zip(a.shape[::-1], b.shape[::-1]))
            if x != y and x != 1 and y != 1
        ]
        nd = max(a.ndim, b.ndim)
        raise DimensionError(op, tuple(nd - 1 - i for i in axes), f"{a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    neg = d < 0
    out[~neg] = 1.0 / (1.0 + np.exp(-d[~neg]))
    e = np.exp(d[neg])
    out[neg] = e / (1.0 + e)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _record("log", np.log(d), (x,), lambda g: (g / d,))


def abs_(x: Tensor) -> Tensor:
    d = x.data
    return _record("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _record("mean", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", tuple(range(len(src))), f"{src} -> {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("getitem", x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            bad = tuple(i for i in range(len(ref)) if i != ax and i < t.ndim and t.shape[i] != ref[i])
            raise DimensionError("concat", bad, f"{ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        "concat",
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul", (a.ndim, b.ndim), "operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", (a.ndim - 1, b.ndim - 2), f"{a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x of shape (..., in) and w of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError("linear", (x.ndim - 1, 1), f"{x.shape} vs weight {w.shape}")
    out = matmul(x, transpose(w))
    return out if b is None else add(out, b)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution of an NCHW tensor with weight (out, in)."""
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError("conv1x1", (1,), f"input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = np.einsum("oc,bchw->bohw", wd, xd, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gx = np.einsum("oc,bohw->bchw", wd, g, optimize=True) if x.requires_grad else None
        gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv1x1", out, inputs, bw)


def _im2col(xd: np.ndarray, k: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Columns ordered (kh, kw, c) so the innermost copy runs over contiguous channels."""
    n, c, h, w = xd.shape
    xp = np.pad(xd.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # n, ho, wo, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c), ho, wo


def _col2im(cols: np.ndarray, shape: tuple, k: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto the input grid."""
    n, c, h, w = shape
    gp = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    cols = cols.reshape(n, ho, wo, k, k, c)
    for dy in range(k):
        for dx in range(k):
            gp[:, dy : dy + ho, dx : dx + wo, :] += cols[:, :, :, dy, dx, :]
    return np.ascontiguousarray(gp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 2-d convolution, NCHW input, weight (out, in, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError("conv2d", (1,), f"input {x.shape} vs weight {w.shape}")
    o, c, k, _ = w.shape
    cols, ho, wo = _im2col(x.data, k, padding)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    n = x.shape[0]
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gf.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gx = _col2im(gf @ wmat, x.shape, k, padding, ho, wo) if x.requires_grad else None
        return gx, gw

    return _record("conv2d", out, (x, w), bw)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError("avg_pool2", (2, 3), f"odd spatial extent {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record("avg_pool2", out, (x,), bw)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties send the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError("max_pool2", (2, 3), f"odd spatial extent {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record("max_pool2", out, (x,), bw)


# ---------------------------------------------------------------------------
# normalisation, activations over an axis


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalisation over channel axis 1.

    Train mode normalises with batch statistics and (optionally) folds them
    into the running buffers in place; eval mode uses the buffers.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batchnorm", (1,), f"input {x.shape} vs affine {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if train:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            count = xd.size // c
            unbiased = var * count / max(count - 1, 1)
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * unbiased
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    count = xd.size // c

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if train:
                s1 = gxhat.sum(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv.reshape(bshape) / count * (count * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _record("batchnorm", out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(d)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    d = x.data - m
    lse = np.log(np.exp(d).sum(axis=axis, keepdims=True))
    out = d - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", out, (x,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return _record("dropout", x.data.copy(), (x,), lambda g: (g,))
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# bilinear resampling


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out, n_in) for half-pixel-centre sampling.

    Source coordinate ``(dst + 0.5) * n_in / n_out - 0.5`` clamped to
    ``[0, n_in - 1]``.
    """
    scale_ = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale_ - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_upsample(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resize the last two axes to ``out_hw`` with separable bilinear weights."""
    if x.ndim < 2:
        raise DimensionError("bilinear_upsample", (x.ndim,), "need at least 2 spatial axes")
    h, w = x.shape[-2:]
    ah = bilinear_weights(h, out_hw[0])
    aw = bilinear_weights(w, out_hw[1])
    out = ah @ x.data @ aw.T
    return _record("bilinear_upsample", out, (x,), lambda g: (ah.T @ g @ aw,))


# ---------------------------------------------------------------------------
# dispatch, gradient checking, EMA


_KINDS: dict[str, Callable] = {
    "matmul": lambda ins, **a: matmul(*ins),
    "conv1x1": lambda ins, **a: conv1x1(*ins),
    "batchnorm": lambda ins, **a: batchnorm(*ins, **a),
    "relu": lambda ins, **a: relu(*ins),
    "sigmoid": lambda ins, **a: sigmoid(*ins),
    "softmax": lambda ins, **a: softmax(*ins, **a),
    "dropout": lambda ins, **a: dropout(*ins, **a),
    "bilinear_upsample": lambda ins, **a: bilinear_upsample(*ins, **a),
    "add": lambda ins, **a: add(*ins),
    "mul": lambda ins, **a: mul(*ins),
    "scale": lambda ins, **a: scale(*ins, **a),
    "concat": lambda ins, **a: concat(ins, **a),
    "mean": lambda ins, **a: mean(*ins, **a),
    "log": lambda ins, **a: log(*ins),
    "exp": lambda ins, **a: exp(*ins),
    "l2_normalize": lambda ins, **a: l2_normalize(*ins, **a),
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply a named operation, e.g. ``forward_op("softmax", [x], {"axis": 0})``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind '{kind}'") from None
    return fn(list(inputs), **(attrs or {}))


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` must be deterministic. The numeric side uses central differences
    with ``x`` perturbed in place; ``x.grad`` is overwritten.
    """
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("input")
    x.requires_grad = True
    x.grad = None
    tape = Tape()
    with use_tape(tape):
        out = f(x)
        check_finite(tape)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("output")
        backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def ema_update(target: Tensor | np.ndarray, source: Tensor | np.ndarray, m: float) -> None:
    """In place: ``target <- m * target + (1 - m) * source``; never recorded."""
    if not 0.0 <= m <= 1.0:
        raise ContractError(f"EMA coefficient must lie in [0, 1], got {m}")
    t = target.data if isinstance(target, Tensor) else target
    s = source.data if isinstance(source, Tensor) else source
    if t.shape != s.shape:
        raise DimensionError("ema_update", tuple(range(t.ndim)), f"{t.shape} vs {s.shape}")
    t[...] = m * t + (1.0 - m) * s
