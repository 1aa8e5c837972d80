"""
Diffcore - Minimal reverse-mode automatic differentiation
Dense float64 arrays, exact gradients, deterministic backward pass
"""
import itertools
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy import special


class ShapeError(ValueError):
    """Raised when two operands have incompatible shapes"""


class GatherIndexError(IndexError):
    """Raised when a gather index falls outside the table"""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient stops being finite"""


ABS_SMOOTH_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

_node_ids = itertools.count()

Scalar = Union[int, float]


class Tensor:
    """
    Graph node holding a float64 array

    Every primitive returns a new Tensor that remembers its parents and a
    closure mapping the output gradient to one gradient per parent.
    """

    __array_priority__ = 100

    def __init__(self, data, parents: Tuple['Tensor', ...] = (), op: str = 'const',
                 requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True) if parents == () else data
        self.parents = parents
        self.op = op
        self.id = next(_node_ids)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, grad_fn) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        logger.error(f"Non-finite value produced by '{op}'")
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    out = Tensor(data, parents, op)
    out._backward = grad_fn
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ====================
# ELEMENTWISE ARITHMETIC
# ====================

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return _make(a.data + b, (a,), 'add_scalar', lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, 'add')
    return _make(a.data + b.data, (a, b), 'add', lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return _make(a.data - b, (a,), 'sub_scalar', lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, 'sub')
    return _make(a.data - b.data, (a, b), 'sub', lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), 'neg', lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _make(a.data * c, (a,), 'mul_scalar', lambda g: (g * c,))
    b = as_tensor(b)
    _check_same(a, b, 'mul')
    av, bv = a.data, b.data
    return _make(av * bv, (a, b), 'mul', lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _make(a.data / c, (a,), 'div_scalar', lambda g: (g / c,))
    b = as_tensor(b)
    _check_same(a, b, 'div')
    av, bv = a.data, b.data
    return _make(av / bv, (a, b), 'div', lambda g: (g / bv, -g * av / (bv * bv)))


# ====================
# LINEAR ALGEBRA AND SHAPE
# ====================

def matmul(a, b) -> Tensor:
    """
    Matrix product over the last two axes

    Either both operands share identical leading axes, or the right operand
    is a plain (k, n) matrix applied to every leading index (a linear layer).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _make(av @ bv, (a, b), 'matmul', grad_fn)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), 'transpose',
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {original} to {tuple(shape)}") from e
    return _make(out, (a,), 'reshape', lambda g: (g.reshape(original),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), 'concat',
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    parts = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in parts)

    def grad_fn(g):
        out = np.zeros(shape)
        if advanced:
            np.add.at(out, key, g)
        else:
            out[key] += g
        return (out,)

    return _make(a.data[key], (a,), 'slice', grad_fn)


def gather(table, ids) -> Tensor:
    """Rows of `table` (axis 0) selected by integer `ids` of any shape"""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise GatherIndexError(f"gather: index out of range [0, {n}) (got {ids.min()}..{ids.max()})")
    shape = table.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), 'gather', grad_fn)


def pick_last(a, ids) -> Tensor:
    """One entry per row along the last axis: out[..., ] = a[..., ids[...]]"""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"pick_last: shape mismatch {a.shape} vs {ids.shape}")
    k = a.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise GatherIndexError(f"pick_last: index out of range [0, {k})")
    idx = ids[..., None]
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), 'pick_last', grad_fn)


def expand(a, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the only place broadcasting is allowed"""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"expand: shape mismatch {a.shape} vs {shape}") from e
    src = a.shape
    lead = len(shape) - len(src)

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), 'expand', grad_fn)


# ====================
# REDUCTIONS
# ====================

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), 'sum', grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return div(sum_(a, axis=axes, keepdims=keepdims), float(count))


def cumsum(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim

    def grad_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis=ax), axis=ax), axis=ax),)

    return _make(np.cumsum(a.data, axis=ax), (a,), 'cumsum', grad_fn)


# ====================
# ELEMENTWISE FUNCTIONS
# ====================

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), 'exp', lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(av)
    return _make(out, (a,), 'log', lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid='ignore'):
        out = np.sqrt(a.data)
    return _make(out, (a,), 'sqrt', lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make(av * av, (a,), 'square', lambda g: (2.0 * av * g,))


def abs_smooth(a, eps: float = ABS_SMOOTH_EPS) -> Tensor:
    """sqrt(x^2 + eps): |x| with a defined derivative at zero"""
    a = as_tensor(a)
    av = a.data
    out = np.sqrt(av * av + eps)
    return _make(out, (a,), 'abs_smooth', lambda g: (g * av / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make(np.maximum(av, 0.0), (a,), 'relu', lambda g: (g * (av > 0),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make(np.sin(av), (a,), 'sin', lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make(np.cos(av), (a,), 'cos', lambda g: (-g * np.sin(av),))


def minimum(a, c: float) -> Tensor:
    """min(x, c) against a constant; gradient is zero wherever x >= c"""
    a = as_tensor(a)
    av = a.data
    return _make(np.minimum(av, c), (a,), 'minimum', lambda g: (g * (av < c),))


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.copy(), (a,), 'stop_gradient', lambda g: (None,))
    out.requires_grad = False
    return out


def straight_through(soft, forward_value) -> Tensor:
    """Forward value is `forward_value` exactly; backward routes the gradient into `soft`"""
    soft = as_tensor(soft)
    value = np.asarray(forward_value, dtype=np.float64)
    if value.shape != soft.shape:
        raise ShapeError(f"straight_through: shape mismatch {soft.shape} vs {value.shape}")
    return _make(value.copy(), (soft,), 'straight_through', lambda g: (g,))


# ====================
# NORMALIZATION
# ====================

def softmax(a) -> Tensor:
    a = as_tensor(a)
    y = special.softmax(a.data, axis=-1)
    return _make(y, (a,), 'softmax',
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    out = special.log_softmax(a.data, axis=-1)
    y = np.exp(out)
    return _make(out, (a,), 'log_softmax',
                 lambda g: (g - y * g.sum(axis=-1, keepdims=True),))


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)"""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), 'layer_norm', grad_fn)


def norm(a, eps: float = 0.0) -> Tensor:
    """Euclidean norm over the last axis, sqrt(sum x^2 + eps)"""
    a = as_tensor(a)
    av = a.data
    with np.errstate(invalid='ignore'):
        out = np.sqrt((av * av).sum(axis=-1) + eps)

    def grad_fn(g):
        with np.errstate(divide='ignore', invalid='ignore'):
            return ((g / out)[..., None] * av,)

    return _make(out, (a,), 'norm', grad_fn)


def primitive_set() -> Tuple[str, ...]:
    """Catalog of the differentiable primitives this engine provides"""
    return (
        'add', 'sub', 'mul', 'div', 'matmul', 'transpose', 'reshape', 'concat',
        'slice', 'gather', 'pick_last', 'sum', 'mean', 'exp', 'log', 'sqrt', 'square',
        'abs_smooth', 'relu', 'softmax', 'log_softmax', 'layer_norm', 'norm', 'cumsum',
        'sin', 'cos', 'minimum', 'stop_gradient', 'straight_through', 'expand', 'neg',
    )


# ====================
# BACKWARD
# ====================

def _reachable(root: Tensor) -> Iterable[Tensor]:
    seen = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for parent in node.parents:
            if parent.id not in seen:
                seen[parent.id] = parent
                stack.append(parent)
    return seen.values()


def backward(loss: Tensor):
    """
    Populate `.grad` on every node reachable from a scalar loss

    Node ids grow in creation order and parents are always created before
    their children, so descending id order is a reverse topological order.
    Nodes that do not track gradients receive zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes = sorted(_reachable(loss), key=lambda n: n.id, reverse=True)
    grads = {loss.id: np.ones_like(loss.data)}
    for node in nodes:
        g = grads.get(node.id)
        if g is None or node._backward is None or not node.requires_grad:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    for node in nodes:
        g = grads.get(node.id)
        if g is None:
            node.grad = np.zeros_like(node.data)
        else:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient at '{node.op}'")
            node.grad = np.array(g, dtype=np.float64).reshape(node.shape)


def value_and_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> Tuple[float, np.ndarray]:
    """Evaluate a scalar function and its gradient at x"""
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    backward(out)
    return float(out.data), xt.grad


def gradcheck(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """
    Compare backward against central finite differences

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if h <= 0:
        raise ValueError("gradcheck step must be positive")
    x = np.array(x, dtype=np.float64)
    try:
        _, analytic = value_and_grad(f, x)
    except NonFiniteError as e:
        raise NonFiniteError(f"gradcheck: f(x) is not finite ({e})") from e
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(Tensor(x)).data)
        flat[i] = old - h
        fm = float(f(Tensor(x)).data)
        flat[i] = old
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
