"""Reverse-mode autodiff over numpy arrays with an explicit tape.

Every differentiable op appends one node to the active ``Tape`` (a Wengert
list, recorded in execution order, which is already topologically sorted).
``backward`` sweeps that list once in reverse, accumulating gradients into a
dict keyed by tensor identity, so fan-out is handled by plain addition and a
second ``backward`` call accumulates on top of existing leaf ``.grad``s.

Two float widths exist: float32 (standard) and float64 (wide). Mixing them in
one op is an error rather than an implicit promotion; python scalars adopt the
tensor's width.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes that cannot combine under the op's rules."""


class ContractError(ValueError):
    """An argument violates an op's stated precondition."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the op forbids it."""


WIDTHS = {"standard": np.float32, "wide": np.float64}
_ALLOWED = (np.float32, np.float64)

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _ALLOWED:
        raise ContractError(f"unsupported width {dtype}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors default to."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Node:
    """One recorded op: output tensor, input tensors, and a backward closure.

    ``bwd`` maps the upstream gradient (ndarray, shape of ``out``) to a tuple
    of gradients aligned with ``inputs`` (entries may be None).
    """

    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: "Tensor", inputs: tuple, bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered record of nodes. Execution order == topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()


_tape_stack: list[Tape] = [Tape()]
_grad_enabled = True


def active_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside produce constant tensors."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _contig(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
    if arr.ndim and not arr.flags.c_contiguous:
        return np.ascontiguousarray(arr)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.type not in _ALLOWED:
                arr = arr.astype(_default_dtype)
        else:
            dtype = np.dtype(dtype).type
            if dtype not in _ALLOWED:
                raise ContractError(f"unsupported dtype {dtype}")
            arr = np.asarray(data, dtype=dtype)
        arr = _contig(arr)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None

    # ---- basic introspection -------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"

    def detach(self) -> "Tensor":
        """Constant view of the same data, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- autodiff -------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from this scalar through the active tape.

        Leaf tensors with requires_grad get ``.grad`` populated (accumulated
        if already set). Each node is visited exactly once.
        """
        if self.shape != ():
            raise ContractError(f"backward root must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward root does not require grad")
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.data.dtype)}
        if self._node is None:
            # degenerate: the root is itself a leaf
            self._accumulate_leaf(grads[id(self)])
            return
        for node in reversed(active_tape().nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.bwd(g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t._accumulate_leaf(gi)
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi

    def _accumulate_leaf(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    # ---- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    # ---- method forms -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm if perm else None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def tanh(self):
        return tanh(self)


def _coerce(value, like: Tensor) -> Tensor:
    """Wrap a python scalar / ndarray as a constant of the partner's width."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(
            f"{op}: mixed widths {a.data.dtype.name} vs {b.data.dtype.name}; cast explicitly"
        )


def _make(out_data: np.ndarray, inputs: tuple, bwd: Callable) -> Tensor:
    """Build the output tensor and record a node if grad flow is live."""
    rg = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    if rg:
        node = Node(out, inputs, bwd)
        out._node = node
        active_tape().nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise binary ----------------------------------------------------


def _binary(a, b, op: str, fwd, da, db) -> Tensor:
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _coerce(a, b)
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = _coerce(b, a)
    _check_same_dtype(a, b, op)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bwd(g, a=a, b=b):
        ga = _unbroadcast(da(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        a, b, "div", np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


# ---- elementwise unary -------------------------------------------------------


def _unary(x: Tensor, fwd, dfd) -> Tensor:
    """dfd(g, x_data, out_data) -> grad wrt x."""
    out = fwd(x.data)

    def bwd(g, x=x):
        return (dfd(g, x.data, out),)

    return _make(out, (x,), bwd)


def neg(x: Tensor) -> Tensor:
    return _unary(x, np.negative, lambda g, xd, y: -g)


def exp(x: Tensor) -> Tensor:
    return _unary(x, np.exp, lambda g, xd, y: g * y)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log, lambda g, xd, y: g / xd)


def sqrt(x: Tensor) -> Tensor:
    return _unary(x, np.sqrt, lambda g, xd, y: g * (0.5 / y))


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    return _unary(x, np.abs, lambda g, xd, y: g * np.sign(xd))


def tanh(x: Tensor) -> Tensor:
    return _unary(x, np.tanh, lambda g, xd, y: g * (1.0 - y * y))


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    # stable on both tails
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    return _unary(x, _sigmoid_arr, lambda g, xd, y: g * y * (1.0 - y))


def silu(x: Tensor) -> Tensor:
    def fwd(xd):
        return xd * _sigmoid_arr(xd)

    def dfd(g, xd, y):
        s = _sigmoid_arr(xd)
        return g * (s + xd * s * (1.0 - s))

    return _unary(x, fwd, dfd)


def relu(x: Tensor) -> Tensor:
    return _unary(x, lambda xd: np.maximum(xd, 0), lambda g, xd, y: g * (xd > 0))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    def fwd(xd):
        return np.where(xd > 0, xd, xd * xd.dtype.type(slope))

    def dfd(g, xd, y):
        return g * np.where(xd > 0, xd.dtype.type(1), xd.dtype.type(slope))

    return _unary(x, fwd, dfd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of the Gaussian error linear unit."""

    def fwd(xd):
        return 0.5 * xd * (1.0 + np.tanh(_GELU_C * (xd + _GELU_A * xd ** 3)))

    def dfd(g, xd, y):
        t = np.tanh(_GELU_C * (xd + _GELU_A * xd ** 3))
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return g * (0.5 * (1.0 + t) + 0.5 * xd * dt)

    return _unary(x, fwd, dfd)


def softplus(x: Tensor) -> Tensor:
    return _unary(
        x,
        lambda xd: np.logaddexp(xd.dtype.type(0), xd),
        lambda g, xd, y: g * _sigmoid_arr(xd),
    )


# ---- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, last two contract."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects tensors on both sides")
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from e

    def bwd(g, a=a, b=b):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


# ---- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g, x=x):
        return (_expand_reduced(np.asarray(g), x.shape, axes, keepdims).astype(x.data.dtype, copy=False),)

    return _make(np.asarray(out, dtype=x.data.dtype), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g, x=x, count=count):
        # every contributing element receives exactly 1/count of the upstream
        g = np.asarray(g) / x.data.dtype.type(count)
        return (_expand_reduced(g, x.shape, axes, keepdims).astype(x.data.dtype, copy=False),)

    return _make(np.asarray(out, dtype=x.data.dtype), (x,), bwd)


def max_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties route the gradient to the lowest linear index."""
    axes = _norm_axes(axis, x.ndim)
    out = x.data.max(axis=axes, keepdims=keepdims)
    # move reduced axes (original relative order) to the back, flatten them:
    # argmax's first-hit rule then matches lowest linear index in the original.
    kept = tuple(i for i in range(x.ndim) if i not in axes)
    perm = kept + tuple(sorted(axes))

    def bwd(g, x=x):
        moved = x.data.transpose(perm)
        outer = moved.shape[: len(kept)]
        flat = moved.reshape(outer + (-1,))
        hit = np.argmax(flat, axis=-1)
        mask_flat = np.zeros_like(flat)
        np.put_along_axis(mask_flat, hit[..., None], 1.0, axis=-1)
        mask = mask_flat.reshape(moved.shape).transpose(np.argsort(perm))
        g = _expand_reduced(np.asarray(g), x.shape, axes, keepdims)
        return (g * mask,)

    return _make(np.asarray(out, dtype=x.data.dtype), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis; rejects NaN input."""
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, axis=axis):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bwd)


# ---- shape ops -----------------------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = _contig(x.data.reshape(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e

    def bwd(g, x=x):
        return (np.asarray(g).reshape(x.shape),)

    return _make(out, (x,), bwd)


def transpose(x: Tensor, perm=None) -> Tensor:
    if perm is None:
        perm = tuple(reversed(range(x.ndim)))
    perm = tuple(p % x.ndim for p in perm)
    if sorted(perm) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {perm} for rank {x.ndim}")
    out = _contig(x.data.transpose(perm))
    inv = tuple(np.argsort(perm))

    def bwd(g):
        return (np.asarray(g).transpose(inv),)

    return _make(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shapes incompatible: {[t.shape for t in tensors]}") from e
    axis = axis % out.ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(np.asarray(g), splits, axis=axis))

    return _make(out, tensors, bwd)


def index(x: Tensor, idx) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof); differentiable."""
    out = x.data[idx]
    out = _contig(out)

    def bwd(g, x=x, idx=idx):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)

    return _make(out, (x,), bwd)


def split(x: Tensor, sizes: Iterable[int], axis: int) -> tuple:
    """Split along an axis into chunks of the given sizes."""
    sizes = list(sizes)
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover axis of length {x.shape[axis]}")
    outs = []
    start = 0
    for s in sizes:
        sl = tuple(slice(None) if a != axis else slice(start, start + s) for a in range(x.ndim))
        outs.append(index(x, sl))
        start += s
    return tuple(outs)


def pad(x: Tensor, pads: Sequence[tuple], value: float = 0.0) -> Tensor:
    """Constant-pad; ``pads`` is (before, after) per axis."""
    pads = tuple((int(b), int(a)) for b, a in pads)
    if len(pads) != x.ndim:
        raise DimensionError(f"pad spec rank {len(pads)} vs tensor rank {x.ndim}")
    out = np.pad(x.data, pads, constant_values=x.data.dtype.type(value))
    inner = tuple(slice(b, b + s) for (b, _), s in zip(pads, x.shape))

    def bwd(g):
        return (np.asarray(g)[inner],)

    return _make(out, (x,), bwd)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select by a boolean/0-1 ndarray mask (the mask is not differentiated)."""
    if isinstance(mask, Tensor):
        mask = mask.data
    mask = np.asarray(mask, dtype=bool)
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _coerce(a, b)
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = _coerce(b, a)
    _check_same_dtype(a, b, "where")
    try:
        out = np.where(mask, a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"where: shapes {mask.shape}, {a.shape}, {b.shape} do not broadcast") from e

    def bwd(g, a=a, b=b):
        ga = _unbroadcast(np.where(mask, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsample of (B, C, H, W)."""
    if x.ndim != 4:
        raise DimensionError(f"upsample expects (B, C, H, W), got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g, x=x):
        b, c, h, w = x.shape
        return (np.asarray(g).reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bwd)


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple) -> Tensor:
    """Average-pool (B, C, H, W) onto an (oh, ow) grid.

    Window for output cell i along an axis of length H is
    [floor(i*H/oh), ceil((i+1)*H/oh)); windows overlap when H < oh and are
    never empty, so any input size maps onto any output grid.
    """
    if x.ndim != 4:
        raise DimensionError(f"adaptive pool expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    oh, ow = out_hw

    def bounds(n, o):
        return [(int(np.floor(i * n / o)), int(np.ceil((i + 1) * n / o))) for i in range(o)]

    hb, wb = bounds(h, oh), bounds(w, ow)
    out = np.empty((b, c, oh, ow), dtype=x.data.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def bwd(g, x=x):
        gx = np.zeros_like(x.data)
        g = np.asarray(g)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                n = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += g[:, :, i : i + 1, j : j + 1] / x.data.dtype.type(n)
        return (gx,)

    return _make(out, (x,), bwd)


# ---- constructors ----------------------------------------------------------------


def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def full(shape, value, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype or _default_dtype), requires_grad=requires_grad)
