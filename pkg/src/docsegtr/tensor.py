"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op here works on :class:`Tensor` objects backed by a numpy array. When
any input requires a gradient the op attaches a :class:`Node` to its output,
holding the parents and a closure mapping the output gradient to the input
gradients. :func:`backward` orders the reachable nodes into a :class:`Tape`,
runs the closures in reverse and then releases the graph, so each recorded
graph supports exactly one backward pass.

Most ops accept arbitrary leading (batch) dimensions on top of the shapes
documented on them.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError, TapeError

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents: tuple, backward_fn: Callable):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional real array with an optional gradient."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def backward(self) -> "Tape":
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(parents, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Operations reachable from a loss, inputs before outputs."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. The graph behind
    ``loss`` is released afterwards; a second call raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss is not attached to a recorded graph (detached or already consumed)")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        in_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=DTYPE).reshape(p.shape)
                else:
                    p.grad = p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    for t in tape.nodes:
        t._node = None
    tape.consumed = True
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x ** p, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping happened."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    nd = as_tensor(a).ndim
    return permute(a, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def take(a, index) -> Tensor:
    """Basic or advanced indexing; the gradient scatter-adds back."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in ts]} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape [in, out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = y + b
    return reshape(y, lead + (w.shape[1],))


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolution and resampling (channels-first: [..., C, H, W])


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """[B, C, H, W] -> ([B, H'*W', C*kh*kw], H', W')."""
    xp = _pad(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # B, C, H', W', kh, kw
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(cols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    b, c, h, w = xshape
    # one contiguous copy ordered (kh, kw, b, c, ho, wo) so that every
    # accumulated block below is a dense slab
    g = np.ascontiguousarray(cols.reshape(b, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _conv_input_grad(gm: np.ndarray, wd: np.ndarray, xshape: tuple, stride: int, padding: int,
                     ho: int, wo: int) -> np.ndarray:
    """Input gradient of conv2d; ``gm`` is the output gradient as [B*H'*W', C_out].

    Accumulates one kernel tap at a time into a channels-last buffer, which
    keeps every addition contiguous in the channel axis.
    """
    b, c, h, w = xshape
    _, _, kh, kw = wd.shape
    wr = wd.transpose(0, 2, 3, 1).reshape(wd.shape[0], -1)
    taps = (gm @ wr).reshape(b, ho, wo, kh, kw, c)
    acc = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            acc[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += taps[:, :, :, i, j]
    if padding:
        acc = acc[:, padding:-padding, padding:-padding]
    return acc.transpose(0, 3, 1, 2)


def _as_batched(x: Tensor, core: int):
    """Reshape leading dims into one batch axis; returns the tensor and the leading shape."""
    lead = x.shape[:-core]
    return reshape(x, (int(np.prod(lead)) if lead else 1,) + x.shape[-core:]), lead


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [C_in, H, W] or [..., C_in, H, W], ``w`` is [C_out, C_in, kh, kw].
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.ndim < 3 or w.ndim != 4 or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    cout, cin, kh, kw = w.shape
    h, wd = x.shape[-2:]
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    xb, lead = _as_batched(x, 3)
    xd = xb.data
    cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
    nb, hw, kk = cols.shape
    cols2 = cols.reshape(nb * hw, kk)
    wmat = w.data.reshape(cout, -1)
    out = cols2 @ wmat.T  # B*HW, Cout
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out += bias.data
    out = out.reshape(nb, hw, cout).transpose(0, 2, 1).reshape(nb, cout, ho, wo)

    def bw(g):
        gm = g.reshape(nb, cout, hw).transpose(0, 2, 1).reshape(nb * hw, cout)
        gw = (gm.T @ cols2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if xb.requires_grad:
            gx = _conv_input_grad(gm, w.data, xd.shape, stride, padding, ho, wo)
        gb = gm.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (xb, w, bias) if bias is not None else (xb, w)
    y = _make(out, parents, bw)
    return reshape(y, lead + (cout, ho, wo))


def unfold2d(x, kh: int, kw: int, padding: int = 0) -> Tensor:
    """Stride-1 patch extraction: [..., C, H, W] -> [..., H'*W', C*kh*kw]."""
    x = as_tensor(x)
    xb, lead = _as_batched(x, 3)
    xd = xb.data
    cols, ho, wo = _im2col(xd, kh, kw, 1, padding)
    out = _make(np.ascontiguousarray(cols), (xb,),
                lambda g: (_col2im(g, xd.shape, kh, kw, 1, padding, ho, wo),))
    return reshape(out, lead + cols.shape[1:])


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input bin [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    for i in range(n_out):
        s = (i * n_in) // n_out
        e = -((-(i + 1) * n_in) // n_out)
        m[i, s:e] = 1.0 / (e - s)
    return m


def adaptive_avg_pool2d(x, size) -> Tensor:
    """Average-pool the last two axes to ``size`` (int or (h, w))."""
    x = as_tensor(x)
    oh, ow = (size, size) if isinstance(size, int) else size
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool output size must be positive, got {(oh, ow)}")
    ph = _pool_matrix(x.shape[-2], oh)
    pw = _pool_matrix(x.shape[-1], ow)
    out = ph @ x.data @ pw.T
    return _make(out, (x,), lambda g: (ph.T @ g @ pw,))


def upsample_nearest2d(x, size) -> Tensor:
    """Nearest-neighbour resize of the last two axes to ``size``.

    Source index is ``floor(i * in / out)``; the gradient scatter-adds.
    """
    x = as_tensor(x)
    oh, ow = (size, size) if isinstance(size, int) else size
    h, w = x.shape[-2:]
    ri = (np.arange(oh) * h) // oh
    ci = (np.arange(ow) * w) // ow
    xd = x.data
    if oh % h == 0 and ow % w == 0:
        fh, fw = oh // h, ow // w
        out = np.repeat(np.repeat(xd, fh, axis=-2), fw, axis=-1)

        def bw(g):
            s = g.shape[:-2] + (h, fh, w, fw)
            return (g.reshape(s).sum(axis=(-3, -1)),)
    else:
        out = xd[..., ri, :][..., ci]

        def bw(g):
            full = np.zeros(xd.shape, dtype=DTYPE)
            rows = np.zeros(xd.shape[:-2] + (h, ow), dtype=DTYPE)
            np.add.at(rows, (..., ri, slice(None)), g)
            np.add.at(full, (..., ci), rows)
            return (full,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    skipped: int


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    kinks: Sequence[float] = (),
    kink_tol: float = 1e-7,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``backward`` gradients of scalar ``f`` at ``x`` to central differences.

    Coordinates whose perturbation interval reaches one of ``kinks`` (within
    ``kink_tol``) are skipped. ``max_coords`` limits the check to a random
    subset of coordinates. Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    base = np.array(x.data, dtype=DTYPE)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    if y._node is None:
        analytic = np.zeros_like(base)
    else:
        backward(y)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
    worst = 0.0
    checked = skipped = 0
    with no_grad():
        for k in coords:
            v = flat[k]
            if any(abs(v - kk) <= max(h, kink_tol) for kk in kinks):
                skipped += 1
                continue
            xp = flat.copy()
            xp[k] = v + h
            fp = f(Tensor(xp.reshape(base.shape))).item()
            xp[k] = v - h
            fm = f(Tensor(xp.reshape(base.shape))).item()
            num = (fp - fm) / (2.0 * h)
            ana = analytic.reshape(-1)[k]
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst = max(worst, err)
            checked += 1
    return GradCheckReport(worst, worst < tol, checked, skipped)
