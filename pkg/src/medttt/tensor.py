"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every backward rule is written in terms of ``Tensor`` operations, so a
gradient computed with ``create_graph=True`` is itself differentiable.  The
TTT inner loop relies on this: the fast weights are updated with tape
gradients and the outer training step differentiates through those updates.

Elementwise broadcasting is deliberately restricted to scalar-with-tensor;
anything wider goes through the explicit :func:`broadcast_to` primitive.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class TensorError(Exception):
    """Base class for tensor contract violations."""


class ShapeError(TensorError, ValueError):
    pass


class DomainError(TensorError, ValueError):
    pass


class NumericError(TensorError, FloatingPointError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


_state = threading.local()
_seq = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: operations inside record nothing on the tape."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """An immutable float64 array plus an optional tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "_freed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._seq = next(_seq)
        self._freed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted fast path: arr is freshly computed float64 and already checked
        t = object.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        t._seq = next(_seq)
        t._freed = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, retain_graph: bool = False) -> dict[int, "Tensor"]:
        return backward(self, retain_graph=retain_graph)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced NaN or Inf")
    out = Tensor._wrap(arr)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


# ---------------------------------------------------------------------------
# gradient computation
# ---------------------------------------------------------------------------


def _collect(root: Tensor, floor: int) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, newest first.

    Creation order is a valid topological order of a define-by-run tape, so
    sorting by sequence number descending gives exact reverse topological
    order.  Nodes created before ``floor`` cannot lead to any requested input
    and are not expanded.
    """
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        if node._seq < floor:
            continue
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def _propagate(root: Tensor, nodes: list[Tensor], seed: Tensor, wanted: set[int] | None) -> dict[int, Tensor]:
    relevant: set[int] | None = None
    if wanted is not None:
        # only nodes with a path to a requested input do backward work
        relevant = set()
        for node in reversed(nodes):
            if id(node) in wanted or any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))
    grads: dict[int, Tensor] = {id(root): seed}
    for node in nodes:
        g = grads.get(id(node))
        if g is None or not node._parents:
            continue
        if relevant is not None and id(node) not in relevant:
            continue
        if node._freed:
            raise TapeError("tape already consumed by a previous backward(); re-run the forward pass")
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if relevant is not None and id(p) not in relevant:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"internal: grad shape {pg.shape} != {p.shape} in {node._op}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else add(prev, pg)
    return grads


def backward(loss: Tensor, retain_graph: bool = False) -> dict[int, Tensor]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Returns a map ``id(leaf) -> gradient``.  Unless ``retain_graph`` is set,
    the tape is consumed and a second call raises :class:`TapeError`.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss._freed:
        raise TapeError("tape already consumed by a previous backward(); re-run the forward pass")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tracked tensor")
    nodes = _collect(loss, floor=-1)
    with no_grad():
        seed = Tensor._wrap(np.ones(loss.shape))
        grads = _propagate(loss, nodes, seed, None)
    out: dict[int, Tensor] = {}
    for node in nodes:
        if not node._parents and not node._freed and id(node) in grads:
            g = grads[id(node)]
            node.grad = g if node.grad is None else Tensor._wrap(node.grad.data + g.data)
            out[id(node)] = node.grad
    if not retain_graph:
        for node in nodes:
            if node._parents:
                node._backward = None
                node._parents = ()
                node._freed = True
    return out


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor | None]:
    """Gradients of a scalar ``output`` w.r.t. arbitrary graph tensors.

    Unlike :func:`backward` this never touches ``.grad`` and never consumes
    the tape.  With ``create_graph`` the results carry their own tape so they
    can be differentiated again.
    """
    if output.size != 1:
        raise TapeError(f"grad() needs a scalar output, got shape {output.shape}")
    if not output.requires_grad or not inputs:
        return [None for _ in inputs]
    floor = min(t._seq for t in inputs)
    nodes = _collect(output, floor=floor)
    with _grad_mode(create_graph):
        seed = Tensor._wrap(np.ones(output.shape))
        grads = _propagate(output, nodes, seed, {id(t) for t in inputs})
    return [grads.get(id(t)) for t in inputs]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


def _reduce_to(g: Tensor, like: Tensor) -> Tensor:
    # undo a scalar broadcast
    if like.ndim == 0 and g.ndim != 0:
        return sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(neg(g), b)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _reduce_to(mul(g, b), a), _reduce_to(mul(g, a), b)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")

    def bw(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return _reduce_to(ga, a), _reduce_to(gb, b)

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (neg(g),), "neg")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (mul(g, mul(a, 2.0)),), "square")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        arr = np.exp(a.data)

    def bw(g):
        return (mul(g, out),)

    out = _result(arr, (a,), bw, "exp")
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _result(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: argument must be non-negative")

    def bw(g):
        return (div(mul(g, 0.5), out),)

    out = _result(np.sqrt(a.data), (a,), bw, "sqrt")
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = Tensor._wrap((a.data > 0.0).astype(np.float64))
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # stable in both tails
    e = np.exp(-np.abs(x))
    arr = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _result(arr, (a,), bw, "sigmoid")
    return out


def _gelu_parts(x: np.ndarray):
    x2 = x * x
    th = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + GELU_COEFF * x2))
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x2)
    return th, du


def _gelu_prime(a: Tensor, th: np.ndarray, du: np.ndarray) -> Tensor:
    x = a.data
    sech2 = 1.0 - th * th
    arr = 0.5 * (1.0 + th) + 0.5 * x * sech2 * du

    def bw(g):
        # second derivative enters as a constant: no third-order support
        d2u = _SQRT_2_OVER_PI * 6.0 * GELU_COEFF * x
        second = sech2 * du + 0.5 * x * sech2 * (d2u - 2.0 * th * du * du)
        return (mul(g, Tensor._wrap(second)),)

    return _result(arr, (a,), bw, "gelu_prime")


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    th, du = _gelu_parts(a.data)
    arr = 0.5 * a.data * (1.0 + th)
    return _result(arr, (a,), lambda g: (mul(g, _gelu_prime(a, th, du)),), "gelu")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got shape {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (transpose(g),), "transpose")


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes.

    Leading (batch) axes must either match exactly, or ``b`` must be a plain
    2-D matrix shared across the batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    shared_b = b.ndim == 2 and a.ndim > 2
    if not shared_b and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ between {a.shape} and {b.shape}")

    def bw(g):
        ga = matmul(g, transpose(b))
        if shared_b:
            k, n = b.shape
            gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, n)))
        else:
            gb = matmul(transpose(a), g)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def _norm_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for ndim {ndim}")
        out.append(int(ax) % ndim)
    return tuple(sorted(out))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim, "sum")
    arr = np.sum(a.data, axis=axes, keepdims=keepdims)
    kept = tuple(1 if (axes is None or i in axes) else n for i, n in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _result(arr, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim, "mean")
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        arr = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(arr, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (permute(g, inverse),), "permute")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums the copies."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if shape == a.shape:
        return a
    try:
        arr = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    stretched = tuple(i for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        out = g
        if lead:
            out = sum(out, axis=tuple(range(lead)))
        if stretched:
            out = sum(out, axis=stretched, keepdims=True)
        return (reshape(out, a.shape),)

    return _result(arr, (a,), bw, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    nd = ts[0].ndim
    (ax,) = _norm_axis(axis, nd, "concat")
    ref = ts[0].shape[:ax] + ts[0].shape[ax + 1 :]
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ref:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(int(lo), int(hi))
            out.append(index(g, tuple(sl)))
        return tuple(out)

    return _result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def flip(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim, "flip")
    return _result(np.flip(a.data, axis=ax).copy(), (a,), lambda g: (flip(g, ax),), "flip")


def index(a, idx) -> Tensor:
    """Basic (slice/int) indexing; the backward pass scatters into zeros."""
    a = _as_tensor(a)
    arr = np.array(a.data[idx], dtype=np.float64)
    return _result(arr, (a,), lambda g: (_scatter(g, idx, a.shape),), "index")


def _scatter(g: Tensor, idx, shape) -> Tensor:
    buf = np.zeros(shape)
    buf[idx] = g.data
    return _result(buf, (g,), lambda gg: (index(gg, idx),), "scatter")


# ---------------------------------------------------------------------------
# resampling, softmax, convolution
# ---------------------------------------------------------------------------


def upsample_nearest(a, factor: int) -> Tensor:
    """Block-replicate the last two axes by ``factor``."""
    a = _as_tensor(a)
    if a.ndim < 2 or factor < 1:
        raise ShapeError(f"upsample_nearest: bad input {a.shape} / factor {factor}")
    arr = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)
    return _result(arr, (a,), lambda g: (mul(downsample_avg(g, factor), float(factor * factor)),), "upsample")


def downsample_avg(a, factor: int) -> Tensor:
    """Average-pool the last two axes with a ``factor`` x ``factor`` window."""
    a = _as_tensor(a)
    if a.ndim < 2 or factor < 1 or a.shape[-1] % factor or a.shape[-2] % factor:
        raise ShapeError(f"downsample_avg: extents {a.shape} not divisible by {factor}")
    h, w = a.shape[-2:]
    arr = a.data.reshape(a.shape[:-2] + (h // factor, factor, w // factor, factor)).mean(axis=(-3, -1))
    return _result(arr, (a,), lambda g: (mul(upsample_nearest(g, factor), 1.0 / (factor * factor)),), "downsample")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    arr = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        inner = sum(mul(g, out), axis=ax, keepdims=True)
        return (mul(out, sub(g, broadcast_to(inner, a.shape))),)

    out = _result(arr, (a,), bw, "softmax")
    return out


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or stride <= 0:
        raise ShapeError(
            f"conv2d: non-positive output extent for input {n}, kernel {k}, stride {stride}, padding {padding}"
        )
    return span // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Direct cross-correlation, looping over kernel offsets.

    ``x`` is ``C x H x W`` or ``N x C x H x W``; ``kernel`` is
    ``C_out x C_in x k x k``.  ``padding=None`` means "same" (k // 2).
    The gradient of a convolution is first-order only.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected (N,)C,H,W input and O,C,k,k kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    o, ci, kh, kw = kernel.shape
    if ci != c or kh != kw:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    k = kh
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    p = k // 2 if padding is None else padding
    ho, wo = _conv_out(h, k, stride, p), _conv_out(w, k, stride, p)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    wd = kernel.data
    out = np.zeros((o, n, ho, wo))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + hs : stride, j : j + ws : stride]
            out += np.tensordot(wd[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)
    if squeeze:
        out = out[0]

    def bw(g):
        if is_grad_enabled():
            raise TapeError("conv2d does not support higher-order gradients")
        gd = g.data[None] if squeeze else g.data
        gx = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i : i + hs : stride, j : j + ws : stride]
                gw[:, :, i, j] = np.tensordot(gd, patch, axes=([0, 2, 3], [0, 2, 3]))
                gx[:, :, i : i + hs : stride, j : j + ws : stride] += np.tensordot(
                    wd[:, :, i, j], gd, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        if squeeze:
            gx = gx[0]
        grads = [Tensor._wrap(np.ascontiguousarray(gx)), Tensor._wrap(gw)]
        if bias is not None:
            grads.append(Tensor._wrap(gd.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return _result(out, parents, bw, "conv2d")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = _as_tensor(a)
    mask = Tensor._wrap(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),), "clip")
