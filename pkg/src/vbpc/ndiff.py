"""Dense float64 matrices with a reverse-mode gradient tape.

Everything is a 2-d array (vectors are 1 x n or n x 1). The primitive set is
closed and fixed: higher layers compose only these ops, so the gradient-check
suite in the tests certifies every downstream gradient. Arrays are immutable
once built; a Tape records primitive applications and `backward` replays the
adjoints in reverse topological order.

A module-level allocation tracker counts live float64 elements owned by this
layer (array buffers, gradient buffers, cached Cholesky factors). It is the
evidence used by the memory benchmarks and the "never materialize an h x h
buffer" assertions.
"""

import math
import weakref
from contextlib import contextmanager

import numpy as np
import scipy.linalg

JITTER = 1e-10


class NdiffError(Exception):
    pass


class ShapeError(NdiffError):
    pass


class NonSPDError(NdiffError):
    pass


class NonFiniteError(NdiffError):
    pass


# ---------------------------------------------------------------------------
# allocation tracking
# ---------------------------------------------------------------------------

class AllocationTracker:
    """Counts live float64 elements owned by the array layer.

    ``live`` is the current element count, ``peak`` the high-water mark and
    ``largest_block`` the largest single allocation seen. Windows opened via
    :func:`track_allocations` observe the same stream over a limited scope.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.largest_block = 0
        self._windows = []

    def add(self, n):
        self.live += n
        if self.live > self.peak:
            self.peak = self.live
        if n > self.largest_block:
            self.largest_block = n
        for w in self._windows:
            w._observe(self.live, n)

    def remove(self, n):
        self.live -= n


class AllocationWindow:
    """Peak and largest single block observed while the window is open."""

    def __init__(self, base):
        self.base = base
        self.peak = base
        self.largest_block = 0

    def _observe(self, live, block):
        if live > self.peak:
            self.peak = live
        if block > self.largest_block:
            self.largest_block = block


tracker = AllocationTracker()


@contextmanager
def track_allocations():
    window = AllocationWindow(tracker.live)
    tracker._windows.append(window)
    try:
        yield window
    finally:
        tracker._windows.remove(window)


def _register_buffer(arr):
    tracker.add(arr.size)
    weakref.finalize(arr, tracker.remove, arr.size)
    return arr


# ---------------------------------------------------------------------------
# arrays and tapes
# ---------------------------------------------------------------------------

def _as_owned_matrix(values):
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"arrays are 2-d, got ndim={arr.ndim}")
    return arr


class Array:
    """Immutable 2-d float64 matrix, optionally attached to a tape node."""

    __slots__ = ("data", "_node", "_chol", "__weakref__")

    def __init__(self, values):
        data = _as_owned_matrix(values)
        if not np.isfinite(data).all():
            raise NonFiniteError("array contains non-finite entries")
        data.flags.writeable = False
        _register_buffer(data)
        self.data = data
        self._node = None
        self._chol = None

    @classmethod
    def _wrap(cls, arr):
        """Adopt a freshly computed buffer without copying (internal)."""
        obj = cls.__new__(cls)
        if arr.dtype != np.float64 or not arr.flags.c_contiguous or not arr.flags.owndata:
            arr = np.array(arr, dtype=np.float64, order="C", copy=True)
        arr.flags.writeable = False
        _register_buffer(arr)
        obj.data = arr
        obj._node = None
        obj._chol = None
        return obj

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 array, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Array(shape={self.data.shape})"


def constant(values):
    return values if isinstance(values, Array) else Array(values)


def zeros(shape):
    return Array._wrap(np.zeros(shape, dtype=np.float64))


def eye(n):
    return Array._wrap(np.eye(n, dtype=np.float64))


_tape_tokens = iter(range(1, 1 << 62))


class _Record:
    __slots__ = ("op", "out_id", "in_ids", "saved", "params")

    def __init__(self, op, out_id, in_ids, saved, params):
        self.op = op
        self.out_id = out_id
        self.in_ids = in_ids
        self.saved = saved
        self.params = params


class Tape:
    """Ordered record of primitive applications on one logical thread."""

    def __init__(self):
        self.token = next(_tape_tokens)
        self.records = []
        self._next_id = 0
        self._leaves = {}
        self._labels = {}

    def _new_id(self):
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, array, label=None):
        """Register `array` as a differentiable leaf and return it."""
        if array._node is not None and array._node[0] == self.token:
            node_id = array._node[1]
        else:
            node_id = self._new_id()
            array._node = (self.token, node_id)
        self._leaves[node_id] = array
        if label is not None:
            self._labels[label] = node_id
        return array

    def node_id(self, array):
        if array._node is None or array._node[0] != self.token:
            return None
        return array._node[1]

    def leaf_id(self, label):
        return self._labels[label]


# ---------------------------------------------------------------------------
# shared cholesky machinery
# ---------------------------------------------------------------------------

def _raw_cholesky(sym):
    """Lower Cholesky factor with the one-shot jitter retry."""
    try:
        return scipy.linalg.cholesky(sym, lower=True)
    except scipy.linalg.LinAlgError:
        pass
    bump = JITTER * float(np.mean(np.diag(sym)))
    jittered = sym + bump * np.eye(sym.shape[0])
    try:
        return scipy.linalg.cholesky(jittered, lower=True)
    except scipy.linalg.LinAlgError:
        raise NonSPDError("matrix is not positive definite (jitter retry failed)")


def _chol_of(array):
    """Lower factor of sym(array), cached so one factorization is shared."""
    if array._chol is None:
        a = array.data
        if a.shape[0] != a.shape[1]:
            raise ShapeError(f"expected square matrix, got {a.shape}")
        sym = 0.5 * (a + a.T)
        chol = _raw_cholesky(sym)
        chol.flags.writeable = False
        _register_buffer(chol)
        array._chol = chol
    return array._chol


def cholesky_spd(array):
    """Factor a symmetric positive definite matrix as L @ L.T, L lower.

    Validates symmetry to 1e-12 relative before factoring; the jitter retry
    of the solve primitives applies here as well.
    """
    a = array.data if isinstance(array, Array) else _as_owned_matrix(array)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {a.shape}")
    scale_ref = max(float(np.abs(a).max()), 1.0)
    if float(np.abs(a - a.T).max()) > 1e-12 * scale_ref:
        raise NonSPDError("matrix is not symmetric to 1e-12 relative")
    return Array._wrap(_raw_cholesky(0.5 * (a + a.T)))


# ---------------------------------------------------------------------------
# primitives: forward + vjp pairs
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a, b, op):
    for da, db in zip(a.shape, b.shape):
        if db != da and db != 1:
            raise ShapeError(f"{op}: shape {b.shape} does not broadcast to {a.shape}")


def _fwd_matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _vjp_matmul(g, saved, needs):
    a, b = saved
    ga = g @ b.T if needs[0] else None
    gb = a.T @ g if needs[1] else None
    return ga, gb


def _fwd_transpose(a):
    return a.T.copy(order="C"), ()


def _vjp_transpose(g, saved, needs):
    return (g.T.copy(order="C"),)


def _fwd_add(a, b):
    _check_broadcast(a, b, "add")
    return a + b, (a.shape, b.shape)


def _vjp_add(g, saved, needs):
    sa, sb = saved
    return (g if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None)


def _fwd_sub(a, b):
    _check_broadcast(a, b, "sub")
    return a - b, (a.shape, b.shape)


def _vjp_sub(g, saved, needs):
    sa, sb = saved
    return (g if needs[0] else None,
            -_unbroadcast(g, sb) if needs[1] else None)


def _fwd_scale(a, factor):
    if not math.isfinite(factor):
        raise NonFiniteError("scale: non-finite factor")
    return factor * a, (factor,)


def _vjp_scale(g, saved, needs):
    (factor,) = saved
    return (factor * g,)


def _fwd_hadamard(a, b):
    _check_broadcast(a, b, "hadamard")
    return a * b, (a, b)


def _vjp_hadamard(g, saved, needs):
    a, b = saved
    ga = g * b if needs[0] else None
    gb = _unbroadcast(g * a, b.shape) if needs[1] else None
    return ga, gb


def _fwd_relu(a):
    return np.maximum(a, 0.0), (a,)


def _vjp_relu(g, saved, needs):
    (a,) = saved
    return (g * (a > 0.0),)


def _fwd_row_log_softmax(a):
    shifted = a - a.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    return out, (out,)


def _vjp_row_log_softmax(g, saved, needs):
    (out,) = saved
    softmax = np.exp(out)
    return (g - softmax * g.sum(axis=1, keepdims=True),)


def _fwd_rsqrt_shift(a, alpha):
    shifted = 1.0 + alpha * a
    if shifted.min() <= 0.0:
        raise NonFiniteError("rsqrt_shift: 1 + alpha*x must be positive")
    out = 1.0 / np.sqrt(shifted)
    return out, (out, alpha)


def _vjp_rsqrt_shift(g, saved, needs):
    out, alpha = saved
    return (-0.5 * alpha * out ** 3 * g,)


def _fwd_cholesky_solve_spd(a, b, _chol=None):
    if a.shape[0] != a.shape[1] or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cholesky_solve_spd: {a.shape} vs {b.shape}")
    sym = 0.5 * (a + a.T)
    x = scipy.linalg.cho_solve((_chol, True), b)
    # one step of iterative refinement keeps solve residuals near eps even
    # for badly conditioned systems (A is always I + PSD here)
    x = x + scipy.linalg.cho_solve((_chol, True), b - sym @ x)
    return x, (_chol, x)


def _vjp_cholesky_solve_spd(g, saved, needs):
    chol, x = saved
    gb = scipy.linalg.cho_solve((chol, True), g)
    if needs[0]:
        gs = -gb @ x.T
        ga = 0.5 * (gs + gs.T)
    else:
        ga = None
    return ga, (gb if needs[1] else None)


def _fwd_logdet_spd(a, _chol=None):
    out = 2.0 * float(np.log(np.diag(_chol)).sum())
    return np.array([[out]]), (_chol,)


def _vjp_logdet_spd(g, saved, needs):
    (chol,) = saved
    inv = scipy.linalg.cho_solve((chol, True), np.eye(chol.shape[0]))
    return (float(g[0, 0]) * 0.5 * (inv + inv.T),)


def _fwd_trace_matmul(a, b):
    if a.shape[1] != b.shape[0] or a.shape[0] != b.shape[1]:
        raise ShapeError(f"trace_matmul: {a.shape} vs {b.shape}")
    out = float((a * b.T).sum())
    return np.array([[out]]), (a, b)


def _vjp_trace_matmul(g, saved, needs):
    a, b = saved
    s = float(g[0, 0])
    ga = s * b.T.copy(order="C") if needs[0] else None
    gb = s * a.T.copy(order="C") if needs[1] else None
    return ga, gb


def _fwd_row_gather(a, idx):
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"row_gather: {idx.shape[0]} indices for {a.shape[0]} rows")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ShapeError("row_gather: index out of range")
    out = a[np.arange(a.shape[0]), idx].reshape(-1, 1)
    return out, (a.shape, idx)


def _vjp_row_gather(g, saved, needs):
    shape, idx = saved
    ga = np.zeros(shape)
    ga[np.arange(shape[0]), idx] = g[:, 0]
    return (ga,)


def _fwd_sum(a, axis=None):
    if axis is None:
        out = np.array([[a.sum()]])
    elif axis == 0:
        out = a.sum(axis=0, keepdims=True)
    elif axis == 1:
        out = a.sum(axis=1, keepdims=True)
    else:
        raise ShapeError(f"sum: axis must be None, 0 or 1, got {axis}")
    return out, (a.shape,)


def _vjp_sum(g, saved, needs):
    (shape,) = saved
    return (np.broadcast_to(g, shape).copy(order="C"),)


def _fwd_broadcast_div(a, v):
    if v.shape != (a.shape[0], 1):
        raise ShapeError(f"broadcast_div: divisor {v.shape} for {a.shape}")
    if np.abs(v).min() == 0.0:
        raise NonFiniteError("broadcast_div: zero divisor")
    out = a / v
    return out, (v, out)


def _vjp_broadcast_div(g, saved, needs):
    v, out = saved
    ga = g / v if needs[0] else None
    gv = -(g * out / v).sum(axis=1, keepdims=True) if needs[1] else None
    return ga, gv


_REGISTRY = {
    "matmul": (_fwd_matmul, _vjp_matmul, 2),
    "transpose": (_fwd_transpose, _vjp_transpose, 1),
    "add": (_fwd_add, _vjp_add, 2),
    "sub": (_fwd_sub, _vjp_sub, 2),
    "scale": (_fwd_scale, _vjp_scale, 1),
    "hadamard": (_fwd_hadamard, _vjp_hadamard, 2),
    "relu": (_fwd_relu, _vjp_relu, 1),
    "row_log_softmax": (_fwd_row_log_softmax, _vjp_row_log_softmax, 1),
    "rsqrt_shift": (_fwd_rsqrt_shift, _vjp_rsqrt_shift, 1),
    "cholesky_solve_spd": (_fwd_cholesky_solve_spd, _vjp_cholesky_solve_spd, 2),
    "logdet_spd": (_fwd_logdet_spd, _vjp_logdet_spd, 1),
    "trace_matmul": (_fwd_trace_matmul, _vjp_trace_matmul, 2),
    "row_gather": (_fwd_row_gather, _vjp_row_gather, 1),
    "sum": (_fwd_sum, _vjp_sum, 1),
    "broadcast_div": (_fwd_broadcast_div, _vjp_broadcast_div, 2),
}


def apply(op, operands, tape=None, **params):
    """Run one primitive, recording it on `tape` when given.

    `operands` is a tuple of Arrays. Operands that are not nodes of `tape`
    are treated as constants: no gradient is propagated into them.
    """
    if op not in _REGISTRY:
        raise NdiffError(f"unknown primitive {op!r}")
    fwd, _, arity = _REGISTRY[op]
    if isinstance(operands, Array):
        operands = (operands,)
    if len(operands) != arity:
        raise ShapeError(f"{op}: expected {arity} operands, got {len(operands)}")
    datas = [o.data for o in operands]
    if op in ("cholesky_solve_spd", "logdet_spd"):
        params = dict(params)
        params["_chol"] = _chol_of(operands[0])
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out_data, saved = fwd(*datas, **params)
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Array._wrap(out_data)
    if tape is not None:
        in_ids = tuple(tape.node_id(o) for o in operands)
        out_id = tape._new_id()
        out._node = (tape.token, out_id)
        public = {k: v for k, v in params.items() if not k.startswith("_")}
        tape.records.append(_Record(op, out_id, in_ids, saved, public))
    return out


def backward(tape, seed):
    """Gradients of the scalar `seed` with respect to every leaf of `tape`.

    Returns a dict node-id -> Array. Leaves the seed does not depend on get
    zero gradients. Fan-out accumulates by summation.
    """
    seed_id = tape.node_id(seed)
    if seed_id is None:
        raise NdiffError("seed is not on this tape")
    if seed.shape != (1, 1):
        raise ShapeError("seed must be a 1x1 scalar")
    grads = {seed_id: Array._wrap(np.ones((1, 1)))}
    for rec in reversed(tape.records):
        g = grads.get(rec.out_id)
        if g is None:
            continue
        _, vjp, _ = _REGISTRY[rec.op]
        needs = tuple(i is not None for i in rec.in_ids)
        if not any(needs):
            continue
        parts = vjp(g.data, rec.saved, needs)
        for in_id, part in zip(rec.in_ids, parts):
            if in_id is None or part is None:
                continue
            prev = grads.get(in_id)
            if prev is None:
                grads[in_id] = Array._wrap(np.array(part, dtype=np.float64, order="C"))
            else:
                grads[in_id] = Array._wrap(prev.data + part)
    out = {}
    for leaf_id, leaf in tape._leaves.items():
        got = grads.get(leaf_id)
        out[leaf_id] = got if got is not None else zeros(leaf.shape)
    return out


# thin wrappers so call sites read like linear algebra

def matmul(a, b, tape=None):
    return apply("matmul", (a, b), tape)


def transpose(a, tape=None):
    return apply("transpose", (a,), tape)


def add(a, b, tape=None):
    return apply("add", (a, b), tape)


def sub(a, b, tape=None):
    return apply("sub", (a, b), tape)


def scale(a, factor, tape=None):
    return apply("scale", (a,), tape, factor=factor)


def hadamard(a, b, tape=None):
    return apply("hadamard", (a, b), tape)


def relu(a, tape=None):
    return apply("relu", (a,), tape)


def row_log_softmax(a, tape=None):
    return apply("row_log_softmax", (a,), tape)


def rsqrt_shift(a, alpha, tape=None):
    return apply("rsqrt_shift", (a,), tape, alpha=alpha)


def cholesky_solve_spd(a, b, tape=None):
    return apply("cholesky_solve_spd", (a, b), tape)


def logdet_spd(a, tape=None):
    return apply("logdet_spd", (a,), tape)


def trace_matmul(a, b, tape=None):
    return apply("trace_matmul", (a, b), tape)


def row_gather(a, idx, tape=None):
    return apply("row_gather", (a,), tape, idx=idx)


def sum(a, axis=None, tape=None):  # noqa: A001 - mirrors np.sum naming
    return apply("sum", (a,), tape, axis=axis)


def broadcast_div(a, v, tape=None):
    return apply("broadcast_div", (a, v), tape)
