"""Dense tensor engine with reverse-mode automatic differentiation.

Arrays are numpy-backed, float32 by default (float64 is used by the
gradient-check tooling).  Every differentiable operation records a node on a
global tape; ``backward`` walks the tape in reverse execution order, which is
a valid topological order of the graph, and visits each node exactly once.
Gradients accumulate across backward calls until explicitly cleared.
"""

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes or modes are incompatible."""


class NumericsError(FloatingPointError):
    """Raised in checked mode when a non-finite value appears."""


_grad_enabled = True
_checked = False


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf detection on every op output and gradient."""
    global _checked
    _checked = bool(flag)


@contextlib.contextmanager
def checked():
    global _checked
    prev = _checked
    _checked = True
    try:
        yield
    finally:
        _checked = prev


def _assert_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value detected in {where}")


class Tensor:
    """A dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    def backward(self) -> None:
        TAPE.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # keep numpy from consuming `ndarray <op> Tensor` elementwise; with this
    # set, numpy raises and Python falls back to the reflected operator here
    __array_ufunc__ = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class _Node:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, backward_fn) -> None:
        self._nodes.append(_Node(output, backward_fn))

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise RuntimeError("backward called on an empty tape")
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += np.ones_like(loss.data)
        # Reverse execution order: every consumer of a node's output was
        # recorded later, so each node sees its complete output gradient.
        for node in reversed(self._nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward_fn(g)


TAPE = Tape()


def backward(loss: Tensor) -> None:
    TAPE.backward(loss)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if _checked:
        _assert_finite(g, "gradient")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _checked:
        _assert_finite(data, "op output")
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        TAPE.record(out, backward_fn)
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _coerce2(a, b):
    """Coerce a binary-op pair; a bare operand adopts the Tensor side's dtype.

    Keeps float32 graphs float32 when constants enter, and keeps float64
    graphs (gradient checks, reference comparisons) at full precision.
    """
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _coerce(a), _coerce(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce2(a, b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce2(a, b)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bw)


def neg(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce2(a, b)
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce2(a, b)
    out_data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out_data = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bw)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    a = _coerce(a)
    out_data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), bw)


def arctan(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        _accum(a, g / (1.0 + a.data * a.data))

    return _make(np.arctan(a.data), (a,), bw)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; on exact ties the gradient routes to the first operand."""
    a, b = _coerce2(a, b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * take_a, a.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(out_data, (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _coerce2(a, b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * take_a, a.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(out_data, (a, b), bw)


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient is passed through inside the closed interval."""
    a = _coerce(a)
    out_data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def bw(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    y = _sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), bw)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _coerce(a)
    s = _sigmoid_np(a.data)
    out_data = a.data * s

    def bw(g):
        _accum(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _make(out_data, (a,), bw)


def softmax(a) -> Tensor:
    """Softmax over the last axis (shift-stabilized)."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - inner))

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def bw(g):
        if axis is None:
            gg = np.broadcast_to(g / count, a.shape).copy()
        else:
            gexp = g if keepdims else np.expand_dims(g, axis)
            gg = np.broadcast_to(gexp / count, a.shape).copy()
        _accum(a, gg)

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(out_data, (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat requires at least one tensor")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(ts), bw)


def take(a, key) -> Tensor:
    """Indexing/slicing with gradient scatter on the way back."""
    a = _coerce(a)
    out_data = a.data[key]

    advanced = isinstance(key, np.ndarray) or (
        isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key)
    )

    def bw(g):
        buf = np.zeros_like(a.data)
        if advanced:
            np.add.at(buf, key, g)
        else:
            buf[key] += g
        _accum(a, buf)

    return _make(out_data, (a,), bw)


def space_to_depth(a) -> Tensor:
    """Rearrange (B,C,H,W) -> (B,4C,H/2,W/2).

    Channel blocks are ordered by (row, col) sub-grid parity:
    (even,even), (even,odd), (odd,even), (odd,odd).  Lossless; the exact
    inverse is ``depth_to_space``.
    """
    a = _coerce(a)
    B, C, H, W = _expect_4d(a, "space_to_depth")
    if H % 2 or W % 2:
        raise ShapeError(f"space_to_depth requires even spatial extent, got {H}x{W}")
    out_data = (
        a.data.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 3, 5, 1, 2, 4)
        .reshape(B, 4 * C, H // 2, W // 2)
    )

    def bw(g):
        gx = (
            g.reshape(B, 2, 2, C, H // 2, W // 2)
            .transpose(0, 3, 4, 1, 5, 2)
            .reshape(B, C, H, W)
        )
        _accum(a, gx)

    return _make(np.ascontiguousarray(out_data), (a,), bw)


def depth_to_space(a) -> Tensor:
    """Exact inverse of ``space_to_depth``: (B,4C,H,W) -> (B,C,2H,2W)."""
    a = _coerce(a)
    B, C4, H, W = _expect_4d(a, "depth_to_space")
    if C4 % 4:
        raise ShapeError(f"depth_to_space requires channels divisible by 4, got {C4}")
    C = C4 // 4
    out_data = (
        a.data.reshape(B, 2, 2, C, H, W)
        .transpose(0, 3, 4, 1, 5, 2)
        .reshape(B, C, 2 * H, 2 * W)
    )

    def bw(g):
        gx = (
            g.reshape(B, C, H, 2, W, 2)
            .transpose(0, 3, 5, 1, 2, 4)
            .reshape(B, C4, H, W)
        )
        _accum(a, gx)

    return _make(np.ascontiguousarray(out_data), (a,), bw)


def upsample_nearest2x(a) -> Tensor:
    """Nearest-neighbour x2 upsampling; backward sums each 2x2 block."""
    a = _coerce(a)
    B, C, H, W = _expect_4d(a, "upsample_nearest2x")
    out_data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def bw(g):
        _accum(a, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make(out_data, (a,), bw)


def _expect_4d(t: Tensor, op: str):
    if t.ndim != 4:
        raise ShapeError(f"{op} expects a 4D (B,C,H,W) tensor, got shape {t.shape}")
    return t.shape


# ---------------------------------------------------------------------------
# matmul / dense
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce2(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivs = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivs
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, ivs * (gh - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), bw)


def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.03,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization for (B,C,H,W).

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place: r <- (1-momentum)*r + momentum*batch.  Eval mode
    normalizes with the running buffers.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    B, C, H, W = _expect_4d(x, "batch_norm2d")
    gshape = (1, C, 1, 1)
    if training:
        n = B * H * W
        if n < 2:
            raise ShapeError("batch_norm2d in training mode needs B*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(gshape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        ivs = 1.0 / np.sqrt(var + eps)
        xhat = xc * ivs.reshape(gshape)
        out_data = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

        def bw(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gh = g * gamma.data.reshape(gshape)
                m1 = gh.mean(axis=(0, 2, 3)).reshape(gshape)
                m2 = (gh * xhat).mean(axis=(0, 2, 3)).reshape(gshape)
                _accum(x, ivs.reshape(gshape) * (gh - m1 - xhat * m2))

        return _make(out_data, (x, gamma, beta), bw)

    ivs = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * ivs).reshape(gshape)
    shift = (beta.data - gamma.data * running_mean * ivs).reshape(gshape)
    out_data = x.data * scale + shift
    xhat_eval = (x.data - running_mean.reshape(gshape)) * ivs.reshape(gshape)

    def bw_eval(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat_eval).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, g * scale)

    return _make(out_data, (x, gamma, beta), bw_eval)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw).

    Forward lowers windows to a matrix (im2col) and runs one GEMM.  The
    weight gradient is computed as kh*kw batched contractions against the
    padded input, the input gradient scatters the column gradient back with
    kh*kw strided slice-adds, so no im2col buffer is retained between passes.
    """
    x, w = _coerce(x), _coerce(w)
    B, C, H, W = _expect_4d(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4D (Cout,Cin,kh,kw), got {w.shape}")
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {Ci}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d invalid stride/padding: {stride}/{padding}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(
            f"conv2d produces an empty output for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    if b is not None:
        b = _coerce(b)
        if b.shape != (Co,):
            raise ShapeError(f"conv2d bias must have shape ({Co},), got {b.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, C * kh * kw
    )
    wmat = w.data.reshape(Co, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, Co, 1, 1)
    out = np.ascontiguousarray(out)

    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if padding:
            xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xpad = x.data
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    xs = xpad[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
                    gw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
            _accum(w, gw)
        if x.requires_grad:
            gcols = gmat @ wmat  # (B*Ho*Wo, C*kh*kw)
            gwin = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xpad)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gwin[
                        :, :, :, :, i, j
                    ]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accum(x, gxp)

    return _make(out, inputs, bw)


def maxpool2d(x, kernel: int, stride=None, padding: int = 0) -> Tensor:
    """Max pooling; ties select the first element in row-major window order."""
    x = _coerce(x)
    B, C, H, W = _expect_4d(x, "maxpool2d")
    if stride is None:
        stride = kernel
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"maxpool2d invalid kernel/stride/padding: {kernel}/{stride}/{padding}")
    Ho = (H + 2 * padding - kernel) // stride + 1
    Wo = (W + 2 * padding - kernel) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"maxpool2d produces an empty output for input {H}x{W}")
    if padding:
        # -inf padding never wins the max; every window covers a real pixel.
        xp = np.pad(
            x.data,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=-np.inf,
        )
    else:
        xp = x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    Hp, Wp = xp.shape[2], xp.shape[3]

    def bw(g):
        ih = (np.arange(Ho) * stride)[None, None, :, None] + arg // kernel
        iw = (np.arange(Wo) * stride)[None, None, None, :] + arg % kernel
        bidx = np.arange(B)[:, None, None, None]
        cidx = np.arange(C)[None, :, None, None]
        flat_idx = (((bidx * C + cidx) * Hp) + ih) * Wp + iw
        buf = np.zeros(B * C * Hp * Wp, dtype=g.dtype)
        np.add.at(buf, flat_idx.ravel(), g.ravel())
        buf = buf.reshape(B, C, Hp, Wp)
        if padding:
            buf = buf[:, :, padding:-padding, padding:-padding]
        _accum(x, buf)

    return _make(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(
    params: Sequence[Tensor],
    velocities: list,
    lr: float,
    momentum: float = 0.937,
    weight_decay: float = 5e-4,
) -> None:
    """One SGD update with classic momentum and decoupled-from-nothing L2:

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    ``velocities`` is mutated in place and must align with ``params``
    (an empty list is initialized on first use).
    """
    if not velocities:
        velocities.extend(np.zeros_like(p.data) for p in params)
    if len(velocities) != len(params):
        raise ValueError("velocity state does not match parameter list")
    for p, v in zip(params, velocities):
        if p.grad is None:
            raise ValueError("sgd_step requires a gradient for every parameter")
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


class SGD:
    """Momentum SGD over a fixed parameter list with per-call learning rate."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01,
                 momentum: float = 0.937, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: list = []

    def step(self, lr=None) -> None:
        sgd_step(self.params, self.velocities, self.lr if lr is None else lr,
                 self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
