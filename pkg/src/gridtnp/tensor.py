"""Reverse-mode automatic differentiation over dense numpy arrays.

This is the substrate for the whole model stack: a define-by-run graph of
``Tensor`` nodes, the differentiable operations the attention/grid machinery
needs (broadcast arithmetic, batched matmul, gather, masked fill, softmax,
layer norm, the usual activations and reductions), scalar-loss
backpropagation, and a central-finite-difference gradient checker.

Tensors are immutable after creation except for gradient accumulation on
leaves. Gradients of intermediate nodes live only inside a backward pass;
leaf gradients (parameters, inputs with ``requires_grad``) accumulate across
backward calls until explicitly zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "EmptyAxisError",
    "GraphError",
    "NumericError",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "concat",
    "split",
    "transpose",
    "swapaxes",
    "reshape",
    "broadcast_to",
    "gather",
    "masked_fill",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "softplus",
    "log",
    "exp",
    "sqrt",
    "tsum",
    "tmean",
    "roll",
    "pad_end",
    "backward",
    "grad_check",
    "GradCheckReport",
    "LAYER_NORM_EPS",
    "MASK_FILL",
]

LAYER_NORM_EPS = 1e-5

# Additive mask fill. Large enough that exp() underflows to exactly 0 after
# the max shift, small enough to stay finite in float32.
MASK_FILL = -1e30


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyAxisError(ShapeError):
    """A reduction axis has zero length where a non-empty one is required."""


class GraphError(RuntimeError):
    """Computation-graph misuse, e.g. backward from a non-scalar."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite ones are required."""


class Tensor:
    """A node in a define-by-run computation graph over a numpy array.

    ``requires_grad`` on an op output is inherited from its inputs; graph
    edges are only recorded when at least one input requires gradients, so
    constant subexpressions cost nothing at backward time.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

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

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar -------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter:
    """A named trainable leaf: a ``Tensor`` with grad plus bookkeeping.

    ``name`` is a path-like identifier assigned when the owning module tree
    is walked; ``init_scheme`` records how the values were drawn.
    """

    __slots__ = ("tensor", "name", "init_scheme")

    def __init__(self, data, name: str = "", init_scheme: str = "zeros"):
        self.tensor = Tensor(data, requires_grad=True)
        self.tensor.grad = np.zeros_like(self.tensor.data)
        self.name = name
        self.init_scheme = init_scheme

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    @property
    def shape(self) -> tuple:
        return self.tensor.data.shape

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, init={self.init_scheme})"


# ---------------------------------------------------------------------------
# graph construction helpers
# ---------------------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    data = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    data = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    data = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul: operands must have ndim >= 2, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast"
        ) from None

    if b.ndim == 2:
        # weight-matrix case: one flattened GEMM instead of a gufunc loop,
        # and the weight gradient is a single GEMM rather than a summed
        # per-batch outer product
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def backward_fn(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _make(data, (a, b), backward_fn)

    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(data, tuple(parts), backward_fn)


def split(t: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Split along an axis into consecutive chunks of the given sizes."""
    t = as_tensor(t)
    if sum(sizes) != t.shape[axis]:
        raise ShapeError(
            f"split: sizes {tuple(sizes)} do not sum to axis length {t.shape[axis]}"
        )
    out, start = [], 0
    for s in sizes:
        key = [slice(None)] * t.ndim
        key[axis] = slice(start, start + s)
        out.append(_getitem(t, tuple(key)))
        start += s
    return out


def _getitem(t: Tensor, key) -> Tensor:
    t = as_tensor(t)
    data = t.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    plain = all(isinstance(p, (slice, int, np.integer)) for p in parts)

    def backward_fn(g):
        buf = np.zeros_like(t.data)
        if plain:
            # slices cannot repeat elements, so plain accumulation is exact
            buf[key] += g
        else:
            np.add.at(buf, key, g)
        return (buf,)

    return _make(data, (t,), backward_fn)


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),))


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    t = as_tensor(t)
    return _make(np.swapaxes(t.data, a, b), (t,), lambda g: (np.swapaxes(g, a, b),))


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)
    data = t.data.reshape(shape)
    return _make(data, (t,), lambda g: (g.reshape(t.shape),))


def broadcast_to(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    shape = tuple(shape)
    data = np.broadcast_to(t.data, shape)
    return _make(data, (t,), lambda g: (_unbroadcast(g, t.shape),))


def gather(t: Tensor, index: np.ndarray) -> Tensor:
    """Index rows along axis 0; output shape is ``index.shape + t.shape[1:]``."""
    t = as_tensor(t)
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"gather: index must be integer, got dtype {index.dtype}")
    data = t.data[index]
    rows = t.shape[0]
    feat = int(np.prod(t.shape[1:], dtype=np.int64))
    combined: list = []  # lazily built scatter index, reused across backward calls

    def backward_fn(g):
        # scatter-add via one bincount over (row, feature) pairs; much faster
        # than np.add.at for the repeated small gathers attention produces
        if not combined:
            combined.append(
                (index.reshape(-1).astype(np.int64)[:, None] * feat + np.arange(feat)).reshape(-1)
            )
        buf = np.bincount(combined[0], weights=g.reshape(-1), minlength=rows * feat)
        return (buf.reshape(t.shape).astype(t.dtype, copy=False),)

    return _make(data, (t,), backward_fn)


def roll(t: Tensor, shift, axis) -> Tensor:
    t = as_tensor(t)
    data = np.roll(t.data, shift, axis=axis)

    def backward_fn(g):
        if isinstance(shift, (tuple, list)):
            back = tuple(-s for s in shift)
        else:
            back = -shift
        return (np.roll(g, back, axis=axis),)

    return _make(data, (t,), backward_fn)


def pad_end(t: Tensor, amounts: Sequence[int]) -> Tensor:
    """Zero-pad at the end of each axis; ``amounts`` has one entry per axis."""
    t = as_tensor(t)
    if len(amounts) != t.ndim:
        raise ShapeError(f"pad_end: need {t.ndim} amounts, got {len(amounts)}")
    pad_width = [(0, int(a)) for a in amounts]
    data = np.pad(t.data, pad_width)
    key = tuple(slice(0, n) for n in t.shape)
    return _make(data, (t,), lambda g: (g[key],))


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def masked_fill(t: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (no grad there)."""
    t = as_tensor(t)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(t.shape, mask.shape)
    except ValueError:
        raise ShapeError(
            f"masked_fill: mask shape {mask.shape} does not broadcast with {t.shape}"
        ) from None
    data = np.where(mask, np.asarray(value, dtype=t.dtype), t.data)

    def backward_fn(g):
        return (_unbroadcast(np.where(mask, 0.0, g), t.shape),)

    return _make(data, (t,), backward_fn)


def softmax(t: Tensor, axis: int) -> Tensor:
    t = as_tensor(t)
    if t.shape[axis] == 0:
        raise EmptyAxisError(f"softmax: axis {axis} of shape {t.shape} is empty")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (t,), backward_fn)


def layer_norm(t: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    t = as_tensor(t)
    if t.shape[-1] == 0:
        raise EmptyAxisError(f"layer_norm: last axis of shape {t.shape} is empty")
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward_fn(g):
        n = t.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (t,), backward_fn)


def relu(t: Tensor) -> Tensor:
    t = as_tensor(t)
    pos = t.data > 0
    return _make(np.where(pos, t.data, 0.0), (t,), lambda g: (np.where(pos, g, 0.0),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    t = as_tensor(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(data, (t,), backward_fn)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably for large |x|."""
    t = as_tensor(t)
    data = np.logaddexp(0.0, t.data)

    def backward_fn(g):
        return (g * expit(t.data),)

    return _make(data, (t,), backward_fn)


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = np.log(t.data)
    return _make(data, (t,), lambda g: (g / t.data,))


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = np.exp(t.data)
    return _make(data, (t,), lambda g: (g * data,))


def sqrt(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = np.sqrt(t.data)
    return _make(data, (t,), lambda g: (g * 0.5 / data,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, t.ndim)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, t.shape).copy(),)

    return _make(data, (t,), backward_fn)


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    axes = _axis_tuple(axis, t.ndim)
    count = int(np.prod([t.shape[a] for a in axes])) if t.ndim else 1
    if count == 0:
        raise EmptyAxisError(f"mean: reduction over empty axes {axes} of {t.shape}")
    data = t.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, t.shape).copy(),)

    return _make(data, (t,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """Iterative post-order DFS: parents appear before their consumers."""
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad.

    ``loss`` must be scalar. Repeated calls accumulate; callers zero grads
    between steps.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    table: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = table.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.accumulate_grad(g)
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in table:
                table[pid] = table[pid] + pg
            else:
                table[pid] = pg


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst_index: tuple
    n_checked: int

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}, {self.n_checked} entries, worst at {self.worst_index})"
        )


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central
    finite differences.

    The relative deviation per entry is ``|a - n| / max(1, |a|, |n|)``. With
    ``max_entries`` set, a random subset of coordinates is probed (for large
    parameter vectors); otherwise every entry is checked.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    if not x.requires_grad:
        raise GraphError("grad_check: x must require gradients")

    x.grad = np.zeros_like(x.data)
    out = f(x)
    if out.data.size != 1:
        raise GraphError(f"grad_check: f must be scalar-valued, got {out.shape}")
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    if not np.all(np.isfinite(analytic)):
        bad = int(np.flatnonzero(~np.isfinite(analytic))[0])
        raise NumericError(
            f"grad_check: non-finite analytic gradient at flat index {bad}"
        )

    n = x.data.size
    if max_entries is not None and max_entries < n:
        rng = rng or np.random.default_rng(0)
        idxs = rng.choice(n, size=max_entries, replace=False)
    else:
        idxs = np.arange(n)

    flat = x.data.reshape(-1)
    worst, worst_i = 0.0, 0
    for i in idxs:
        i = int(i)
        keep = flat[i]
        flat[i] = keep + step
        up = float(f(x).data.reshape(()))
        flat[i] = keep - step
        down = float(f(x).data.reshape(()))
        flat[i] = keep
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(
                f"grad_check: non-finite function value while probing flat index {i}"
            )
        numeric = (up - down) / (2.0 * step)
        a = analytic[i]
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if rel > worst:
            worst, worst_i = rel, i
    return GradCheckReport(
        max_rel_error=float(worst),
        tol=tol,
        passed=bool(worst < tol),
        worst_index=np.unravel_index(worst_i, x.data.shape),
        n_checked=len(idxs),
    )
