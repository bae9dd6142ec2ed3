"""Dense float64 tensors with reverse-mode gradients.

Operations run eagerly on numpy arrays and record themselves on a
thread-local tape. ``backward(loss)`` replays the tape once in reverse,
accumulating gradients into every ``requires_grad`` tensor that the loss
depends on, then discards the tape. There is no implicit broadcasting:
binary ops demand identical shapes, and the one sanctioned broadcast
(a row vector added across the rows of a matrix) is its own operation,
``add_rowvec``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import DegenerateInputError, NumericError, ShapeError, StaleGraphError

_state = threading.local()


def _tape():
    if not hasattr(_state, "nodes"):
        _state.nodes = []
        _state.epoch = 0
        _state.enabled = True
    return _state


class Tensor:
    """A dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_epoch")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._epoch = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Node:
    __slots__ = ("out", "back")

    def __init__(self, out, back):
        self.out = out
        self.back = back


def _record(out: Tensor, inputs, back) -> Tensor:
    """Mark `out` as produced from `inputs`; `back` pushes out.grad to them."""
    st = _tape()
    if st.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._epoch = st.epoch
        st.nodes.append(_Node(out, back))
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    st = _tape()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def backward(loss: Tensor):
    """Propagate d(loss)/d(t) into every reachable requires_grad tensor.

    The tape is consumed: a second backward without a fresh forward pass
    raises StaleGraphError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    st = _tape()
    if loss._epoch != st.epoch or not st.nodes:
        raise StaleGraphError("loss is not attached to the active graph; rerun the forward pass")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(st.nodes):
        if node.out.grad is not None:
            node.back(node.out.grad)
    st.nodes = []
    st.epoch += 1


def reset_graph():
    """Drop any recorded nodes without running backward."""
    st = _tape()
    st.nodes = []
    st.epoch += 1


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(out, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def back(g):
        _accumulate(a, g * s)

    return _record(out, (a,), back)


def one_minus(a: Tensor) -> Tensor:
    out = Tensor(1.0 - a.data)

    def back(g):
        _accumulate(a, -g)

    return _record(out, (a,), back)


def add_n(tensors) -> Tensor:
    """Sum of same-shape tensors in one node."""
    tensors = list(tensors)
    first = tensors[0]
    for t in tensors[1:]:
        _check_same_shape("add_n", first, t)
    out = Tensor(sum(t.data for t in tensors))

    def back(g):
        for t in tensors:
            _accumulate(t, g)

    return _record(out, tensors, back)


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """m[r,c] + v[c] for every row r: the explicit row-broadcast mode."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: matrix {m.data.shape} vs row vector {v.data.shape}")
    out = Tensor(m.data + v.data[None, :])

    def back(g):
        _accumulate(m, g)
        _accumulate(v, g.sum(axis=0))

    return _record(out, (m, v), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not chain")
    out = Tensor(a.data @ b.data)

    def back(g):
        # dA = g @ B^T, dB = A^T @ g
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    out = Tensor(a.data.T.copy())

    def back(g):
        _accumulate(a, g.T)

    return _record(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())

    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def back(g):
        _accumulate(a, np.full(a.data.shape, float(g)))

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    """Logistic function. In float64 it saturates to exactly 0/1 around |x|>37."""
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    out = Tensor(y)

    def back(g):
        _accumulate(a, g * y * (1.0 - y))

    return _record(out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def back(g):
        _accumulate(a, g * (1.0 - y * y))

    return _record(out, (a,), back)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    y = np.maximum(a.data, 0.0)
    out = Tensor(y)

    def back(g):
        _accumulate(a, g * (a.data > 0))

    return _record(out, (a,), back)


def log(a: Tensor) -> Tensor:
    """Natural log; the caller is responsible for a positive domain."""
    out = Tensor(np.log(a.data))

    def back(g):
        _accumulate(a, g / a.data)

    return _record(out, (a,), back)


def softmax_rows(a: Tensor, mask=None) -> Tensor:
    """Row-wise softmax, stabilized by per-row max subtraction.

    `mask` is an optional boolean array matching `a`; masked entries are
    excluded from the normalization and come out exactly 0. A row with no
    unmasked entry raises DegenerateInputError.
    """
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax_rows: mask {mask.shape} vs data {x.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateInputError("softmax_rows: a row is fully masked")
        shifted = np.where(mask, x, -np.inf)
        rowmax = shifted.max(axis=1, keepdims=True)
        e = np.exp(np.where(mask, x - rowmax, 0.0)) * mask
    else:
        rowmax = x.max(axis=1, keepdims=True)
        e = np.exp(x - rowmax)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def back(g):
        # per row: dx = y * (g - sum(g*y)); masked entries have y=0, so dx=0
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: ranks differ, {a.data.shape} vs {b.data.shape}")
    for d in range(a.data.ndim):
        if d != axis and a.data.shape[d] != b.data.shape[d]:
            raise ShapeError(f"concat axis {axis}: shapes {a.data.shape} and {b.data.shape} disagree")
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.data.shape[axis]

    def back(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _record(out, (a, b), back)


def stack_rows(tensors) -> Tensor:
    """Concatenate [1 x d] (or [k x d]) tensors along axis 0 in one node."""
    tensors = list(tensors)
    width = tensors[0].data.shape[1]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[1] != width:
            raise ShapeError(f"stack_rows: incompatible shape {t.data.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[lo:hi])

    return _record(out, tensors, back)


def masked_mean(a: Tensor, mask) -> Tensor:
    """Mean over the rows of a [n x d] tensor where mask[n] is true."""
    if a.data.ndim != 2:
        raise ShapeError(f"masked_mean expects a matrix, got shape {a.data.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (a.data.shape[0],):
        raise ShapeError(f"masked_mean: mask {mask.shape} vs {a.data.shape[0]} rows")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("masked_mean: no unmasked rows")
    out = Tensor(a.data[mask].sum(axis=0) / count)

    def back(g):
        ga = np.zeros_like(a.data)
        ga[mask] = g / count
        _accumulate(a, ga)

    return _record(out, (a,), back)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index; repeated indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return _record(out, (a,), back)


def gather_rows_mean(a: Tensor, groups) -> Tensor:
    """Row i of the output is the mean of a[g] over the index group groups[i].

    Used to average several embedding rows into one (an exercise that maps
    to more than one knowledge concept).
    """
    if any(len(g) == 0 for g in groups):
        raise DegenerateInputError("gather_rows_mean: empty index group")
    rows = np.repeat(np.arange(len(groups)), [len(g) for g in groups])
    cols = np.concatenate([np.asarray(g, dtype=np.intp) for g in groups])
    w = np.repeat([1.0 / len(g) for g in groups], [len(g) for g in groups])
    y = np.zeros((len(groups), a.data.shape[1]))
    np.add.at(y, rows, a.data[cols] * w[:, None])
    out = Tensor(y)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, cols, g[rows] * w[:, None])
        _accumulate(a, ga)

    return _record(out, (a,), back)


def pad_rows(a: Tensor, idx, n_rows: int) -> Tensor:
    """Place the rows of a [m x d] tensor at positions idx of an [n x d] zero matrix."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"pad_rows: {a.data.shape[0]} rows but {idx.shape[0]} indices")
    y = np.zeros((n_rows, a.data.shape[1]))
    y[idx] = a.data
    out = Tensor(y)

    def back(g):
        _accumulate(a, g[idx])

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Per-parameter relative error between analytic and numeric gradients."""

    def __init__(self, errors, tolerance):
        self.errors = errors
        self.tolerance = tolerance
        self.max_error = max(errors.values()) if errors else 0.0
        self.passed = self.max_error < tolerance

    def __repr__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return (f"GradCheckReport(passed={self.passed}, max_error={self.max_error:.3e}"
                f" at {worst!r}, tolerance={self.tolerance:.1e})")


def grad_check(f, params, step=1e-5, tolerance=1e-4) -> GradCheckReport:
    """Compare backward() gradients of the scalar f() against central differences.

    `f` must rebuild its graph on every call and be deterministic in
    `params` (a name -> Tensor mapping). The relative error denominator is
    floored at 1e-6 so that near-zero gradients do not blow up the ratio.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    errors = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(f().data)
                flat[i] = orig - step
                f_minus = float(f().data)
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric).all() or not np.isfinite(analytic[name]).all():
                raise NumericError(f"grad_check: non-finite gradient for parameter {name!r}")
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
            errors[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(errors, tolerance)
