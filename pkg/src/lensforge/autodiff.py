"""Reverse-mode automatic differentiation on a recording tape.

The engine differentiates scalar quantities. For throughput, a DiffScalar
may hold a numpy array of values: each array lane is an independent scalar
evaluation (e.g. one ray in a bundle), all operations are elementwise, and
broadcasting a true scalar parameter against a lane array accumulates its
adjoint by summation over lanes. Reductions (``total``, ``mean``) are the
only ops that couple lanes.

Tapes are cheap and short-lived: build one per loss evaluation, call
``backward``, throw it away. Ops on plain floats/arrays (no DiffScalar
involved) never touch a tape, so the same numeric code runs with or
without gradient recording.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "DiffScalar",
    "GradientTape",
    "NonFiniteLossError",
    "backward",
    "finite_difference_check",
    "value_of",
    "sqrt",
    "sin",
    "cos",
    "tan",
    "arctan",
    "arcsin",
    "exp",
    "log",
    "absolute",
    "minimum",
    "maximum",
    "where",
    "total",
    "mean",
    "gather",
    "scatter_add",
]

_MISSING = object()

_local = threading.local()


class NonFiniteLossError(ValueError):
    """Raised when backward() is asked to differentiate a non-finite loss."""

    def __init__(self, node_id, message=None):
        self.node_id = node_id
        super().__init__(message or f"non-finite value at tape node {node_id}")


def _active_tape():
    return getattr(_local, "tape", None)


def value_of(x):
    """Plain numeric value of ``x``, whether DiffScalar or raw number/array."""
    return x.value if isinstance(x, DiffScalar) else x


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if shape == ():
        return float(np.sum(grad))
    g = np.asarray(grad, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape_of(v):
    return np.shape(v)


class GradientTape:
    """Append-only record of a scalar computation.

    Each node stores (op id, parent node handles, local partials). Parents
    always precede children, so a single reverse sweep accumulates exact
    adjoints. Leaves created through :meth:`parameter` form the ordered
    registry that :func:`backward` returns gradients for.
    """

    def __init__(self):
        self._ops = []
        self._parents = []
        self._pulls = []  # per-node: tuple of partial arrays, or a VJP callable
        self._values = []
        self._params = []
        self.recorded_elements = 0  # scalar slots held by values + partials

    # -- construction ---------------------------------------------------

    def __enter__(self):
        self._outer = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = self._outer
        return False

    @property
    def node_count(self):
        return len(self._ops)

    def _append(self, op, parents, pulls, value):
        nid = len(self._ops)
        self._ops.append(op)
        self._parents.append(parents)
        self._pulls.append(pulls)
        self._values.append(value)
        self.recorded_elements += np.size(value)
        if not callable(pulls):
            for p in pulls:
                self.recorded_elements += np.size(p)
        return nid

    def leaf(self, value):
        """A differentiable leaf that is not in the parameter registry."""
        value = _as_value(value)
        nid = self._append("leaf", (), (), value)
        return DiffScalar(value, self, nid)

    def parameter(self, value):
        """A differentiable leaf registered for gradient extraction."""
        out = self.leaf(value)
        self._params.append(out.node)
        return out

    def record(self, op, inputs, value, partials):
        """Append one primitive: ``value`` with given ``partials`` per input.

        Inputs may mix DiffScalars and constants; constants get no parent
        edge and contribute no gradient.
        """
        if len(partials) != len(inputs):
            raise ValueError("one partial per input required")
        parents = []
        pulls = []
        for x, p in zip(inputs, partials):
            if isinstance(x, DiffScalar):
                if x.tape is not None and x.tape is not self:
                    raise ValueError("input recorded on a different tape")
                if x.node is not None:
                    parents.append(x.node)
                    pulls.append(_as_value(p))
        value = _as_value(value)
        nid = self._append(op, tuple(parents), tuple(pulls), value)
        return DiffScalar(value, self, nid)

    def record_vjp(self, op, inputs, value, vjp):
        """Append a structured op whose backward is the callable ``vjp``.

        ``vjp(adjoint)`` must return one adjoint contribution per recorded
        input, already shaped like that input's value.
        """
        parents = tuple(x.node for x in inputs if isinstance(x, DiffScalar) and x.node is not None)
        value = _as_value(value)
        nid = self._append(op, parents, vjp, value)
        return DiffScalar(value, self, nid)

    # -- reverse sweep ----------------------------------------------------

    def backward(self, loss):
        """Gradient of ``loss`` w.r.t. every registered parameter, in order."""
        if not isinstance(loss, DiffScalar) or loss.tape is not self or loss.node is None:
            raise ValueError("loss was not produced by this tape")
        if not np.all(np.isfinite(loss.value)):
            raise NonFiniteLossError(self._first_nonfinite_node())
        adj = [None] * len(self._ops)
        adj[loss.node] = np.ones(_shape_of(loss.value), dtype=np.float64) if _shape_of(loss.value) else 1.0
        for nid in range(loss.node, -1, -1):
            a = adj[nid]
            if a is None:
                continue
            parents = self._parents[nid]
            if not parents:
                continue
            pulls = self._pulls[nid]
            if callable(pulls):
                contribs = pulls(a)
            else:
                contribs = [p * a for p in pulls]
            for pid, contrib in zip(parents, contribs):
                c = _unbroadcast(contrib, _shape_of(self._values[pid]))
                if adj[pid] is None:
                    adj[pid] = c
                else:
                    adj[pid] = adj[pid] + c
        grads = []
        for pid in self._params:
            g = adj[pid]
            if g is None:
                g = np.zeros(_shape_of(self._values[pid])) if _shape_of(self._values[pid]) else 0.0
            grads.append(g)
        return grads

    def _first_nonfinite_node(self):
        for nid, v in enumerate(self._values):
            if not np.all(np.isfinite(v)):
                return nid
        return None


def backward(loss, tape):
    """Module-level alias for :meth:`GradientTape.backward`."""
    return tape.backward(loss)


def _as_value(v):
    if isinstance(v, np.ndarray):
        return v.astype(np.float64, copy=False)
    if isinstance(v, (np.floating, np.integer)):
        return float(v)
    return v


class DiffScalar:
    """A scalar value participating in a recorded computation.

    ``node`` is the handle into the owning tape; a DiffScalar constructed
    with ``node=None`` is a constant and contributes zero gradient.
    """

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape=None, node=None):
        self.value = _as_value(value)
        self.tape = tape
        self.node = node

    @classmethod
    def constant(cls, value):
        return cls(value, None, None)

    def __repr__(self):
        return f"DiffScalar({self.value!r})"

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        ov = value_of(other)
        return _rec("add", (self, other), self.value + ov, (_ones(self), _ones(other)))

    __radd__ = __add__

    def __sub__(self, other):
        ov = value_of(other)
        return _rec("sub", (self, other), self.value - ov, (_ones(self), -_ones(other)))

    def __rsub__(self, other):
        ov = value_of(other)
        return _rec("sub", (other, self), ov - self.value, (_ones(other), -_ones(self)))

    def __mul__(self, other):
        ov = value_of(other)
        return _rec("mul", (self, other), self.value * ov, (ov, self.value))

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov = value_of(other)
        inv = 1.0 / ov
        return _rec("div", (self, other), self.value * inv, (inv, -self.value * inv * inv))

    def __rtruediv__(self, other):
        ov = value_of(other)
        inv = 1.0 / self.value
        return _rec("div", (other, self), ov * inv, (inv, -ov * inv * inv))

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("only constant exponents are differentiable here")
        v = self.value**k
        return _rec("pow", (self,), v, (k * self.value ** (k - 1),))

    def __neg__(self):
        return _rec("neg", (self,), -self.value, (-_ones(self),))

    # comparisons act on values and are not differentiable -------------------

    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    def __float__(self):
        return float(self.value)


def _ones(x):
    v = value_of(x)
    return np.ones_like(v) if isinstance(v, np.ndarray) else 1.0


def _tape_for(*xs):
    for x in xs:
        if isinstance(x, DiffScalar) and x.tape is not None:
            return x.tape
    return None


def _rec(op, inputs, value, partials):
    tape = _tape_for(*inputs)
    if tape is None:
        return DiffScalar.constant(value)
    return tape.record(op, inputs, value, partials)


def _any_diff(*xs):
    return any(isinstance(x, DiffScalar) for x in xs)


# generic math: dispatches to numpy for plain values, records otherwise ------


def sqrt(x):
    if isinstance(x, DiffScalar):
        v = np.sqrt(x.value)
        return _rec("sqrt", (x,), v, (0.5 / v,))
    return np.sqrt(x)


def sin(x):
    if isinstance(x, DiffScalar):
        return _rec("sin", (x,), np.sin(x.value), (np.cos(x.value),))
    return np.sin(x)


def cos(x):
    if isinstance(x, DiffScalar):
        return _rec("cos", (x,), np.cos(x.value), (-np.sin(x.value),))
    return np.cos(x)


def tan(x):
    if isinstance(x, DiffScalar):
        c = np.cos(x.value)
        return _rec("tan", (x,), np.tan(x.value), (1.0 / (c * c),))
    return np.tan(x)


def arctan(x):
    if isinstance(x, DiffScalar):
        return _rec("arctan", (x,), np.arctan(x.value), (1.0 / (1.0 + x.value**2),))
    return np.arctan(x)


def arcsin(x):
    if isinstance(x, DiffScalar):
        return _rec("arcsin", (x,), np.arcsin(x.value), (1.0 / np.sqrt(1.0 - x.value**2),))
    return np.arcsin(x)


def exp(x):
    if isinstance(x, DiffScalar):
        v = np.exp(x.value)
        return _rec("exp", (x,), v, (v,))
    return np.exp(x)


def log(x):
    if isinstance(x, DiffScalar):
        return _rec("log", (x,), np.log(x.value), (1.0 / x.value,))
    return np.log(x)


def absolute(x):
    if isinstance(x, DiffScalar):
        s = np.where(x.value >= 0.0, 1.0, -1.0)
        return _rec("abs", (x,), np.abs(x.value), (s,))
    return np.abs(x)


def minimum(a, b):
    """Elementwise min. At a tie the gradient goes to the FIRST argument,
    so clamps written ``minimum(u, bound)`` keep the live branch at u == bound."""
    av, bv = value_of(a), value_of(b)
    if not _any_diff(a, b):
        return np.minimum(av, bv)
    take_a = av <= bv
    m_a = np.where(take_a, 1.0, 0.0) if np.shape(take_a) else (1.0 if take_a else 0.0)
    m_b = np.where(take_a, 0.0, 1.0) if np.shape(take_a) else (0.0 if take_a else 1.0)
    return _rec("min", (a, b), np.minimum(av, bv), (m_a, m_b))


def maximum(a, b):
    """Elementwise max with tie-to-first-argument gradient (see minimum)."""
    av, bv = value_of(a), value_of(b)
    if not _any_diff(a, b):
        return np.maximum(av, bv)
    take_a = av >= bv
    m_a = np.where(take_a, 1.0, 0.0) if np.shape(take_a) else (1.0 if take_a else 0.0)
    m_b = np.where(take_a, 0.0, 1.0) if np.shape(take_a) else (0.0 if take_a else 1.0)
    return _rec("max", (a, b), np.maximum(av, bv), (m_a, m_b))


def where(cond, a, b):
    """Select by boolean mask; gradient flows only through the chosen branch."""
    cond = np.asarray(cond) if np.shape(cond) else cond
    av, bv = value_of(a), value_of(b)
    if not _any_diff(a, b):
        return np.where(cond, av, bv)
    m_a = np.where(cond, 1.0, 0.0)
    m_b = np.where(cond, 0.0, 1.0)
    return _rec("where", (a, b), np.where(cond, av, bv), (m_a, m_b))


def total(x):
    """Sum of all lanes, as a true scalar."""
    if isinstance(x, DiffScalar):
        return _rec("sum", (x,), float(np.sum(x.value)), (_ones(x),))
    return float(np.sum(x))


def mean(x):
    if isinstance(x, DiffScalar):
        n = np.size(x.value)
        return _rec("mean", (x,), float(np.mean(x.value)), (_ones(x) / n,))
    return float(np.mean(x))


def gather(x, idx):
    """x[idx] for integer index arrays; backward scatters adjoints."""
    idx = np.asarray(idx)
    if isinstance(x, DiffScalar):
        xv = np.asarray(x.value)

        def vjp(adj, _n=xv.shape, _idx=idx):
            out = np.zeros(_n, dtype=np.float64)
            np.add.at(out, _idx, adj)
            return (out,)

        return x.tape.record_vjp("gather", (x,), xv[idx], vjp) if x.tape else DiffScalar.constant(xv[idx])
    return np.asarray(x)[idx]


def scatter_add(idx, w, size):
    """Weighted bincount: out[i] = sum of w where idx == i; backward gathers."""
    idx = np.asarray(idx).ravel()
    if isinstance(w, DiffScalar):
        wv = np.asarray(w.value).ravel()
        val = np.bincount(idx, weights=wv, minlength=size)[:size]

        def vjp(adj, _idx=idx):
            return (adj[_idx],)

        return w.tape.record_vjp("scatter_add", (w,), val, vjp) if w.tape else DiffScalar.constant(val)
    return np.bincount(idx, weights=np.asarray(w).ravel(), minlength=size)[:size]


def finite_difference_check(f, at, step):
    """Max relative disagreement between autodiff and central differences.

    ``f`` maps a list of scalar parameters (DiffScalar or float, one per
    coordinate) to a scalar. Relative error per coordinate is
    |ad - fd| / max(|ad|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    at = [float(v) for v in at]
    with GradientTape() as tape:
        params = [tape.parameter(v) for v in at]
        loss = f(params)
        lv = float(value_of(loss))
        if not math.isfinite(lv):
            raise ValueError("f returned a non-finite value")
        grads = tape.backward(loss)
    worst = 0.0
    for i in range(len(at)):
        hi = list(at)
        lo = list(at)
        hi[i] += step
        lo[i] -= step
        f_hi = float(value_of(f(hi)))
        f_lo = float(value_of(f(lo)))
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise ValueError("f returned a non-finite value during differencing")
        fd = (f_hi - f_lo) / (2.0 * step)
        ad = float(grads[i])
        err = abs(ad - fd) / max(abs(ad), 1e-8)
        worst = max(worst, err)
    return worst
