"""Dense tensors with reverse-mode automatic differentiation on a flat tape.

Values are numpy arrays (float64 by default, float32 selectable). Every op
registers a vector-Jacobian closure; ``backward`` walks the graph in reverse
topological order. Broadcasting is deliberately restricted: two operands
conform only if their shapes are equal, one is a scalar, or one shape is a
trailing suffix of the other (broadcast over leading batch axes).
"""
from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "Rng", "ShapeError", "DomainError", "tensor", "zeros", "ones",
    "concat", "logsumexp", "maximum", "minimum", "stop_gradient", "matmul",
    "expand", "rowscale", "backward", "zero_grads", "grad_check", "no_grad",
    "set_default_dtype", "get_default_dtype",
    "encode_tensor", "decode_tensor", "encode_tensor_list", "decode_tensor_list",
]

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}, use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only forward)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _conformed_shape(sa: tuple, sb: tuple) -> tuple:
    """Resulting shape of an elementwise op, or raise ShapeError."""
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"shapes {sa} and {sb} do not conform "
                     "(equal, scalar, or leading-batch broadcast only)")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes introduced by broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    out = grad.sum(axis=tuple(range(extra)))
    return out.reshape(shape)


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` after
    ``backward``; repeated backward calls keep accumulating until grads are
    explicitly zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    # Keep numpy scalars from hijacking mixed expressions like np.float64 * Tensor.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad: bool = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, vjps) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = any(p.requires_grad for p in parents)
            out._parents = tuple(parents)
            out._vjps = tuple(vjps)
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjps = ()
        return out

    # -- basic protocol --------------------------------------------------

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
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- chained ops -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def clamp(self, min=None, max=None):
        return clamp(self, min=min, max=max)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _conformed_shape(a.shape, b.shape)
    out = a.data + b.data
    return Tensor._from_op(
        out, (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _conformed_shape(a.shape, b.shape)
    out = a.data - b.data
    return Tensor._from_op(
        out, (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _conformed_shape(a.shape, b.shape)
    out = a.data * b.data
    return Tensor._from_op(
        out, (a, b),
        (lambda g: _reduce_to(g * b.data, a.shape),
         lambda g: _reduce_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _conformed_shape(a.shape, b.shape)
    out = a.data / b.data
    return Tensor._from_op(
        out, (a, b),
        (lambda g: _reduce_to(g / b.data, a.shape),
         lambda g: _reduce_to(-g * a.data / (b.data * b.data), b.shape)),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _conformed_shape(a.shape, b.shape)
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)
    return Tensor._from_op(
        out, (a, b),
        (lambda g: _reduce_to(g * mask, a.shape),
         lambda g: _reduce_to(g * ~mask, b.shape)),
    )


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _conformed_shape(a.shape, b.shape)
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)
    return Tensor._from_op(
        out, (a, b),
        (lambda g: _reduce_to(g * mask, a.shape),
         lambda g: _reduce_to(g * ~mask, b.shape)),
    )


# -- elementwise unary -----------------------------------------------------

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(-a.data, (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of negative input")
    out = np.log(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g / (2.0 * out),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._from_op(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    if exponent != int(exponent) and np.any(a.data < 0):
        raise DomainError("fractional power of negative input")
    out = a.data ** exponent
    return Tensor._from_op(
        out, (a,), (lambda g: g * exponent * a.data ** (exponent - 1.0),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), (lambda g: g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return Tensor._from_op(a.data * scale, (a,), (lambda g: g * scale,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g * out * (1.0 - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Split on sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return Tensor._from_op(out, (a,), (lambda g: g * _sigmoid_np(a.data),))


def clamp(a, min=None, max=None) -> Tensor:
    """Clip values; gradient passes only where the input was not clipped."""
    a = _as_tensor(a)
    out = np.clip(a.data, min, max)
    mask = np.ones_like(a.data, dtype=bool)
    if min is not None:
        mask &= a.data >= min
    if max is not None:
        mask &= a.data <= max
    return Tensor._from_op(out, (a,), (lambda g: g * mask,))


def stop_gradient(a) -> Tensor:
    """Pass the value forward and block all gradient flow."""
    a = _as_tensor(a)
    return Tensor(a.data)


def expand(a, shape) -> Tensor:
    """Explicitly tile axes of extent 1 up to ``shape`` (reverse rule: sum).

    Implicit broadcasting stays restricted to leading batch axes; this op is
    the escape hatch for row/column scaling patterns.
    """
    a = _as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim or any(
            s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"cannot expand {a.shape} to {shape}: only axes of "
                         "extent 1 may grow")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor._from_op(
        out, (a,), (lambda g: g.sum(axis=axes, keepdims=True) if axes else g,))


def rowscale(m, v) -> Tensor:
    """Scale each row of matrix ``m`` [n,k] by vector ``v`` [n]."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ShapeError(f"rowscale expects [n,k] and [n], got {m.shape}, {v.shape}")
    return m * expand(reshape(v, (-1, 1)), m.shape)


# -- shape ops --------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), (lambda g: g.reshape(old),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._from_op(a.data.T.copy(), (a,), (lambda g: g.T,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return Tensor._from_op(
        out, (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    return Tensor._from_op(out, tuple(tensors),
                           tuple(make_vjp(i) for i in range(len(tensors))))


def take(a, idx) -> Tensor:
    """Basic slicing/indexing with scatter-add backward."""
    a = _as_tensor(a)
    out = a.data[idx]
    if np.isscalar(out):
        out = np.asarray(out)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return Tensor._from_op(np.array(out, copy=True), (a,), (vjp,))


# -- reductions ---------------------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return Tensor._from_op(np.asarray(out), (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis_n = _normalize_axis(axis, a.ndim)
    if axis_n is None:
        count = a.size
    else:
        count = 1
        for ax in axis_n:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out_full = m + np.log(total)
    out = out_full if keepdims else np.squeeze(out_full, axis=ax)
    softmax = shifted / total

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        return gg * softmax

    return Tensor._from_op(np.asarray(out), (a,), (vjp,))


# -- backward -----------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Accumulates into ``grad`` of every reachable tensor with
    ``requires_grad=True``. Repeated calls keep accumulating.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    # Iterative topological order (graphs can be deep at many epochs).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            prev = flowing.get(id(parent))
            flowing[id(parent)] = contrib if prev is None else prev + contrib


def zero_grads(params) -> None:
    """Zero the grad of every tensor in an iterable or name->Tensor mapping."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# -- RNG ------------------------------------------------------------------------

class Rng:
    """Deterministic random stream: same seed + same call sequence, same draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: int) -> "Rng":
        """Independent derived stream; stable function of (seed, tag)."""
        return Rng((self.seed * 1_000_003 + int(tag)) % (2 ** 63))

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape).astype(_DEFAULT_DTYPE)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(_DEFAULT_DTYPE)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)


# -- gradient checking -------------------------------------------------------------

def grad_check(f, point, eps: float = 1e-6, max_coords: int | None = None,
               coord_rng: Rng | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one tensor (or a list of tensors) to a scalar Tensor. The
    relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    ``max_coords`` caps how many coordinates per tensor are probed.
    """
    points = point if isinstance(point, (list, tuple)) else [point]
    points = [p if isinstance(p, Tensor) else Tensor(p) for p in points]
    leaves = [Tensor(p.data.copy(), requires_grad=True) for p in points]

    def call():
        return f(leaves if isinstance(point, (list, tuple)) else leaves[0])

    out = call()
    zero_grads(leaves)
    backward(out)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            gen = coord_rng or Rng(0)
            idxs = gen.choice(n, size=max_coords, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = call().item()
            flat[i] = orig - eps
            lo = call().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - numeric) / max(1.0, abs(ana))
            worst = max(worst, err)
    return worst


# -- binary tensor encoding ----------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    """Little-endian record: u64 rank, u64 extents, raw float64 payload."""
    arr = np.asarray(arr)
    head = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = 1
    for s in shape:
        count *= s
    end = offset + 8 * count
    if end > len(buf):
        raise ValueError(f"tensor record truncated at byte {len(buf)} (need {end})")
    arr = np.frombuffer(buf[offset:end], dtype="<f8").reshape(shape).copy()
    return arr, end


def encode_tensor_list(arrays) -> bytes:
    return b"".join(encode_tensor(a) for a in arrays)


def decode_tensor_list(buf: bytes, count: int) -> list[np.ndarray]:
    out, offset = [], 0
    for _ in range(count):
        arr, offset = decode_tensor(buf, offset)
        out.append(arr)
    if offset != len(buf):
        raise ValueError(f"{len(buf) - offset} trailing bytes after {count} tensors")
    return out
