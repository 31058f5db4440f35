"""Dense tensors with a reverse-mode differentiation tape.

Operations record themselves on the innermost active :class:`Tape` when
any input requires a gradient. Outside a tape everything runs as plain
numpy (inference mode).

>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     y = sum_all(mul(x, x))
>>> tape.backward(y)
>>> x.grad
array([2., 4., 6.])
"""

import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row has every column masked out."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned different values."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = data if type(data) is np.ndarray and dtype is None else np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: object


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager; operations executed inside the ``with``
    block are appended in execution order, which is a topological order.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(loss, self)


def _record(out, inputs, backward_fn):
    stack = getattr(_local, "stack", None)
    tape = stack[-1] if stack else None
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss, tape):
    """Populate ``.grad`` of every leaf tensor that requires a gradient.

    Leaf gradients accumulate across calls; intermediate gradients live
    only for the duration of one sweep.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.data.dtype)
            else:
                inp.grad += gi


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(ad @ bd)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b):
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b):
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def scale(a, c):
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def relu(a):
    keep = a.data > 0
    out = Tensor(np.where(keep, a.data, 0.0).astype(a.data.dtype))
    return _record(out, (a,), lambda g: (np.where(keep, g, 0.0),))


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inverse = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inverse),))


def sum_all(a):
    out = Tensor(np.asarray(a.data.sum()))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.size)


def embedding(table, ids):
    """Gather rows ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range for embedding table with {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), bw)


def softmax_rows(x, mask=None, shift=None):
    """Softmax over the last axis with an optional column mask.

    ``mask`` broadcasts against ``x`` (True = keep); masked outputs are
    exactly zero. ``shift`` broadcasts against ``x.shape[:-1] + (1,)`` and
    is added to every entry of its row before normalizing. Softmax is
    invariant to such a shift, so its gradient is identically zero.
    """
    shape = x.shape
    width = shape[-1]
    rows = x.size // width if width else 0
    if mask is None:
        m2 = np.ones((rows, width), dtype=np.bool_)
    else:
        m2 = np.ascontiguousarray(np.broadcast_to(np.asarray(mask, dtype=np.bool_), shape))
        m2 = m2.reshape(rows, width)
        if not m2.any(axis=1).all():
            raise DegenerateRowError("softmax row with every column masked")
    if shift is None:
        s1 = np.zeros(rows, dtype=x.data.dtype)
    else:
        s1 = np.broadcast_to(shift.data, shape[:-1] + (1,)).reshape(rows)
        s1 = np.ascontiguousarray(s1, dtype=x.data.dtype)
    x2 = np.ascontiguousarray(x.data.reshape(rows, width))
    y2 = kernels.softmax_forward(x2, m2, s1)
    out = Tensor(y2.reshape(shape))

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(rows, width))
        gx = kernels.softmax_backward(y2, g2).reshape(shape)
        gs = None if shift is None else np.zeros(shift.shape, dtype=shift.data.dtype)
        return gx, gs

    inputs = (x,) if shift is None else (x, shift)
    return _record(out, inputs, lambda g: bw(g)[: len(inputs)])


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and add ``bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    shape = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2, xhat, rstd = kernels.layer_norm_forward(x2, gain.data, bias.data, eps)
    out = Tensor(y2.reshape(shape))

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgain, dbias = kernels.layer_norm_backward(g2, xhat, rstd, gain.data)
        return dx.reshape(shape), dgain, dbias

    return _record(out, (x, gain, bias), bw)


def dropout(x, rate, rng):
    """Inverted dropout; the identity (same tensor) when ``rate`` is 0."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)
    out = Tensor(x.data * keep)
    return _record(out, (x,), lambda g: (g * keep,))


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse
    out = Tensor(out_data)

    def bw(g):
        p = np.exp(out_data)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_analytic: float
    max_abs_numeric: float
    n_coords: int
    flagged: list


@dataclass
class GradCheckReport:
    params: dict
    tol: float

    @property
    def max_rel_err(self):
        return max((p.max_rel_err for p in self.params.values()), default=0.0)

    @property
    def ok(self):
        return all(not p.flagged for p in self.params.values())

    def offenders(self):
        return [name for name, p in self.params.items() if p.flagged]


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


EXTENDED = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def grad_check(f, params, h=1e-5, tol=1e-4, max_coords=None, rng=None, precision="extended"):
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params`` (a name -> Tensor mapping). Tensors with ``requires_grad``
    false are skipped.

    With ``precision="extended"`` the finite differences are evaluated in
    long double at the same parameter values, which keeps rounding noise
    far below ``tol`` even for coordinates whose gradient is ~1e-8. A
    central difference smaller than the loss's own rounding resolution is
    reported as an exact zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    live = {name: t for name, t in params.items() if t.requires_grad}

    base = f().item()
    if f().item() != base:
        raise DeterminismError("f returned different values on repeated calls")

    for t in live.values():
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {
        name: np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)
        for name, t in live.items()
    }

    work = EXTENDED if precision == "extended" else np.float64
    eps = np.finfo(work).eps
    saved = {name: t.data for name, t in params.items()}
    for t in params.values():
        t.data = t.data.astype(work)

    def value():
        return work(f().data.reshape(-1)[0])

    report = {}
    try:
        for name, t in live.items():
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                pick = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
                coords = np.sort(pick)
            numeric = np.zeros(coords.size)
            for i, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + work(h)
                fp = value()
                flat[c] = orig - work(h)
                fm = value()
                flat[c] = orig
                diff = fp - fm
                if abs(diff) <= 16 * eps * max(abs(fp), abs(fm)):
                    diff = work(0.0)
                numeric[i] = float(diff / (2 * work(h)))
            a = analytic[name].reshape(-1)[coords]
            err = relative_error(a, numeric)
            report[name] = ParamCheck(
                name=name,
                max_rel_err=float(err.max()) if err.size else 0.0,
                max_abs_analytic=float(np.abs(a).max()) if a.size else 0.0,
                max_abs_numeric=float(np.abs(numeric).max()) if numeric.size else 0.0,
                n_coords=int(coords.size),
                flagged=[int(c) for c, e in zip(coords, err) if e > tol],
            )
    finally:
        for name, t in params.items():
            t.data = saved[name]
    return GradCheckReport(report, tol)
