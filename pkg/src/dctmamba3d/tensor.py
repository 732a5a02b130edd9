"""Minimal n-dimensional tensor with tape-based reverse-mode autodiff.

Every differentiable operation records a :class:`Node` on the active
:class:`Tape` whenever one of its inputs requires a gradient. Nodes are
appended in creation order, so the tape is already topologically sorted and
the backward pass simply walks it in reverse.

Broadcasting is deliberately limited to scalar-vs-tensor and equal shapes;
anything richer goes through :meth:`Tensor.expand`, which makes the gradient
reduction explicit.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class Node:
    __slots__ = ("op", "inputs", "vjp", "out", "index")

    def __init__(self, op: str, inputs: tuple, vjp: Callable, out: "Tensor"):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.out = out
        self.index = -1


class Tape:
    """Ordered record of the operations of one forward pass.

    A tape is confined to one thread. After :meth:`backward` the recorded
    nodes are released so intermediate buffers can be collected.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def backward(self, loss: "Tensor", retain: bool = False) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node.index + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    # leaf
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                    else:
                        inp.grad = inp.grad + gi
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        if not retain:
            self.free()

    def free(self) -> None:
        for node in self.nodes:
            node.out._node = None
            node.out._tape = None
            node.inputs = ()
            node.vjp = None
        self.nodes = []


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.enabled = True


_state = _TapeState()


def current_tape() -> Tape:
    if not _state.stack:
        _state.stack.append(Tape())
    return _state.stack[-1]


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None):
    """Route recorded ops onto ``tape`` (a fresh one by default)."""
    tape = Tape() if tape is None else tape
    _state.stack.append(tape)
    try:
        yield tape
    finally:
        _state.stack.pop()


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(op: str, data: np.ndarray) -> None:
    # a finite sum implies finite elements; only fall back on overflow
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """An n-d array of reals with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.require(arr, requirements="C")  # keeps 0-d arrays 0-d
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    # -- construction of op outputs -------------------------------------------------
    @staticmethod
    def from_op(op: str, data: np.ndarray, inputs: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        """Wrap ``data`` as the output of ``op`` and record its backward rule.

        ``vjp`` maps the upstream gradient to a tuple with one entry per input
        (``None`` for inputs that need no gradient).
        """
        _check_finite(op, data)
        track = _state.enabled and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=track, dtype=data.dtype)
        if track:
            tape = current_tape()
            node = Node(op, tuple(inputs), vjp, out)
            tape.record(node)
            out._node = node
            out._tape = tape
        return out

    # -- basic properties ----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        if self._tape is None:
            raise ValueError("tensor is not on a tape (nothing requires grad?)")
        self._tape.backward(self)

    # -- arithmetic ----------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    # -- shape helpers -------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def expand(self, shape) -> "Tensor":
        return expand(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape or b.size == 1 and b.ndim <= a.ndim or a.size == 1 and a.ndim <= b.ndim:
        return np.broadcast_shapes(a.shape, b.shape)
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                     "(only scalar or equal shapes are supported)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


# -- elementwise -----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    _broadcast_pair("add", a, b)
    return Tensor.from_op("add", a.data + b.data, (a, b),
                          lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    _broadcast_pair("sub", a, b)
    return Tensor.from_op("sub", a.data - b.data, (a, b),
                          lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_pair("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor.from_op("mul", ad * bd, (a, b),
                          lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_pair("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor.from_op("div", out, (a, b),
                          lambda g: (_reduce_to(g / bd, ad.shape),
                                     _reduce_to(-g * out / bd, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor.from_op("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.from_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor.from_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)  # non-finite results are reported by from_op
    return Tensor.from_op("log", out, (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor.from_op("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return Tensor.from_op("silu", x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(x, 0).astype(x.dtype, copy=False)
    return Tensor.from_op("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


# -- linear algebra ------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor.from_op("matmul", ad @ bd, (a, b), vjp)


# -- reductions and shape ops --------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return Tensor.from_op("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from exc
    return Tensor.from_op("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor.from_op("transpose", out, (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of ``a`` (size-1 axes only) to ``shape``."""
    shape = tuple(shape)
    src = a.shape
    if len(src) != len(shape) or any(s != 1 and s != t for s, t in zip(src, shape)):
        raise ShapeError(f"expand: cannot expand {src} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor.from_op("expand", out, (a,),
                          lambda g: (np.sum(g, axis=axes, keepdims=True) if axes else g,))


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    src = a.shape

    def vjp(g):
        out = np.zeros(src, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor.from_op("take", np.take(a.data, idx, axis=axis), (a,), vjp)


def flip(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    return Tensor.from_op("flip", np.flip(a.data, axis).copy(), (a,),
                          lambda g: (np.flip(g, axis).copy(),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return Tensor.from_op("concat", np.concatenate(datas, axis=axis), tuple(tensors),
                          lambda g: tuple(np.split(g, sizes, axis=axis)))


def reflect_indices(n: int, pad: int) -> np.ndarray:
    """Index map for reflect padding (edge sample not repeated)."""
    if pad >= n and n > 1 or (n == 1 and pad > 0):
        raise ShapeError(f"reflect padding {pad} needs an extent > {pad}, got {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    over = idx > n - 1
    idx[over] = 2 * (n - 1) - idx[over]
    return idx


def pad(a: Tensor, widths: Sequence[int], mode: str = "zero") -> Tensor:
    """Pad the trailing ``len(widths)`` axes symmetrically by ``widths[i]``."""
    lead = a.ndim - len(widths)
    if mode == "reflect":
        out = a
        for i, w in enumerate(widths):
            if w:
                out = take(out, reflect_indices(a.shape[lead + i], w), lead + i)
        return out
    if mode != "zero":
        raise ValueError(f"unknown padding mode {mode!r}")
    pw = [(0, 0)] * lead + [(w, w) for w in widths]
    sl = tuple([slice(None)] * lead + [slice(w, w + a.shape[lead + i]) for i, w in enumerate(widths)])
    return Tensor.from_op("pad", np.pad(a.data, pw), (a,), lambda g: (g[sl],))


# -- activations, normalisation, losses ---------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Tensor.from_op("softmax", s, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor.from_op("log_softmax", out, (a,),
                          lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine part).

    A constant slice maps to zeros because ``eps`` floors the variance.
    """
    if not eps > 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = np.mean(g * xhat, axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor.from_op("layer_norm", xhat, (a,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(K,)`` with a scalar label, or ``(B, K)`` with ``B`` labels.
    """
    single = logits.ndim == 1
    x = logits.data[None] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels)).astype(np.intp)
    b, k = x.shape
    if lab.shape != (b,):
        raise ShapeError(f"cross_entropy: {lab.shape[0]} labels for {b} rows")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(b), lab].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(b), lab] -= 1
        p *= g / b
        return (p[0] if single else p,)

    return Tensor.from_op("cross_entropy", np.asarray(loss, dtype=x.dtype), (logits,), vjp)


def conv3d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           padding_mode: str = "zero") -> Tensor:
    """3-D cross-correlation of ``x[B, Cin, D, H, W]`` with ``kernels[Cout, Cin, kd, kh, kw]``.

    Output extents follow ``(D + 2p - kd) // stride + 1`` per axis. Frozen
    kernels are simply tensors with ``requires_grad=False``.
    """
    if x.ndim != 5 or kernels.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and kernels, got {x.shape} and {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}")
    if stride < 1:
        raise ValueError(f"conv3d stride must be >= 1, got {stride}")
    ksize = kernels.shape[2:]
    if padding:
        x = pad(x, (padding,) * 3, padding_mode)
    ext = x.shape[2:]
    out_ext = tuple((n - k) // stride + 1 for n, k in zip(ext, ksize))
    if any(n < k for n, k in zip(ext, ksize)) or min(out_ext) <= 0:
        raise ShapeError(f"conv3d: non-positive output extent for padded input {ext} and kernel {ksize}")
    xd, wd = x.data, kernels.data
    win = np.lib.stride_tricks.sliding_window_view(xd, ksize, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :out_ext[0], :out_ext[1], :out_ext[2]]
    out = np.tensordot(win, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def vjp(g):
        gw = gx = None
        if kernels.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            gx = np.zeros_like(xd)
            d, h, w = out_ext
            for i in range(ksize[0]):
                for j in range(ksize[1]):
                    for k in range(ksize[2]):
                        contrib = np.tensordot(g, wd[:, :, i, j, k], axes=([1], [0]))
                        gx[:, :, i:i + stride * d:stride, j:j + stride * h:stride,
                           k:k + stride * w:stride] += contrib.transpose(0, 4, 1, 2, 3)
        return gx, gw

    return Tensor.from_op("conv3d", out, (x, kernels), vjp)
