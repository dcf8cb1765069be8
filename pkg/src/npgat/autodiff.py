"""Small reverse-mode differentiation engine over float64 numpy arrays.

A :class:`Tape` records every operation eagerly. Calling :meth:`Tape.backward`
on a scalar replays the recorded operations in reverse, accumulating
``Tensor.grad`` for every tensor on the tape.

Besides the usual dense ops there are segmented reductions (``segment_sum``,
``segment_softmax``) over a :class:`Segments` index, which is what graph
attention needs to normalise and aggregate over incoming arcs.
"""
from __future__ import annotations

import math
import weakref

import numpy as np
import scipy.sparse as sp


try:
    import numba
except ImportError:  # pragma: no cover - numpy fallback
    numba = None


def _rowdot_numpy(a, b, ia, ib):
    return np.einsum("ij,ij->i", a[ia], b[ib])


if numba is not None:
    @numba.njit(cache=True)
    def _rowdot(a, b, ia, ib):
        out = np.empty(ia.size)
        for e in range(ia.size):
            r, c = ia[e], ib[e]
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[r, k] * b[c, k]
            out[e] = acc
        return out
else:  # pragma: no cover
    _rowdot = _rowdot_numpy


def rowdot(a, b, ia, ib):
    """``(a[ia] * b[ib]).sum(axis=1)`` without materialising the gathers."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _rowdot(a, b, ia, ib)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class Segments:
    """Assignment of ``n_items`` rows to ``n_segments`` groups.

    The CSR reduction matrix is built lazily and reused by every op that
    reduces over these segments, so summation order is fixed by item index.
    """

    def __init__(self, ids, n_segments):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.n_segments = int(n_segments)
        if self.ids.ndim != 1:
            raise ShapeError("segment ids must be 1-D")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.n_segments):
            raise ShapeError("segment id out of range")
        self._matrix = None

    def __len__(self):
        return self.ids.size

    @property
    def matrix(self):
        if self._matrix is None:
            n = self.ids.size
            self._matrix = sp.csr_matrix(
                (np.ones(n), (self.ids, np.arange(n))), shape=(self.n_segments, n)
            )
        return self._matrix

    def reduce(self, values):
        """Sum rows of ``values`` within each segment."""
        out = self.matrix @ values
        return np.asarray(out)

    def segment_max(self, values):
        out = np.full(self.n_segments, -np.inf)
        np.maximum.at(out, self.ids, values)
        return out

    def counts(self):
        return np.bincount(self.ids, minlength=self.n_segments)

    def weighted_matrix(self, weights, cols, n_cols):
        """CSR matrix with ``weights[e]`` at ``(ids[e], cols[e])``."""
        if self.ids.size > 1 and np.any(np.diff(self.ids) < 0):
            return sp.csr_matrix((weights, (self.ids, cols)), shape=(self.n_segments, n_cols))
        indptr = np.concatenate([[0], np.cumsum(self.counts())])
        return sp.csr_matrix((weights, cols, indptr), shape=(self.n_segments, n_cols))


class Tensor:
    __slots__ = ("values", "_grad", "_tape", "node_id", "requires_grad", "name")

    def __init__(self, values, tape, node_id, requires_grad=True, name=None):
        self.values = values
        self._grad = None  # zeros until something flows in
        # weak, so a finished tape is freed by refcount instead of waiting for
        # the cycle collector (large arrays, few objects: it rarely runs)
        self._tape = weakref.ref(tape)
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def tape(self):
        tape = self._tape()
        if tape is None:
            raise RuntimeError("the tape of this tensor no longer exists")
        return tape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"Tensor(id={self.node_id}, shape={self.shape})"

    def item(self):
        return float(self.values.reshape(-1)[0])

    # operator sugar; constants on either side are lifted onto the tape
    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, key):
        return self.tape.getitem(self, key)

    def __pow__(self, exponent):
        return self.tape.power(self, exponent)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, *tensors):
    try:
        return np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{op}: incompatible shapes {shapes}") from None


class Tape:
    """Ordered record of operations; one tape per forward/backward pass."""

    def __init__(self):
        self.tensors = []
        self.ops = []  # (output, inputs, backward_fn)
        self._backward_done = False

    def __len__(self):
        return len(self.ops)

    def _new(self, values, requires_grad, name=None):
        values = np.asarray(values, dtype=np.float64)
        t = Tensor(values, self, len(self.tensors), requires_grad, name)
        self.tensors.append(t)
        return t

    def leaf(self, values, name=None):
        """Differentiable input (parameter or position)."""
        return self._new(np.array(values, dtype=np.float64, copy=True), True, name)

    def const(self, values):
        return self._new(np.array(values, dtype=np.float64, copy=True), False)

    def lift(self, x):
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return x
        return self.const(x)

    def _record(self, values, inputs, backward_fn):
        requires_grad = any(t.requires_grad for t in inputs)
        out = self._new(values, requires_grad)
        if requires_grad:
            self.ops.append((out, inputs, backward_fn))
        return out

    def reset_grads(self):
        for t in self.tensors:
            t._grad = None
        self._backward_done = False

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss must be a tensor on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if self._backward_done:
            self.reset_grads()
        loss._grad = np.ones_like(loss.values)
        for out, inputs, backward_fn in reversed(self.ops):
            if out._grad is None:
                continue
            grads = backward_fn(out._grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                # never accumulate in place: backward fns may hand out shared arrays
                if t._grad is None:
                    t._grad = np.asarray(g, dtype=np.float64).reshape(t.shape)
                else:
                    t._grad = t._grad + g
        self._backward_done = True

    # ------------------------------------------------------------------
    # elementwise arithmetic

    def add(self, a, b):
        a, b = self.lift(a), self.lift(b)
        _broadcast_shape("add", a, b)
        return self._record(
            a.values + b.values,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    def sub(self, a, b):
        a, b = self.lift(a), self.lift(b)
        _broadcast_shape("sub", a, b)
        return self._record(
            a.values - b.values,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        )

    def mul(self, a, b):
        a, b = self.lift(a), self.lift(b)
        _broadcast_shape("mul", a, b)
        av, bv = a.values, b.values
        ra, rb = a.requires_grad, b.requires_grad
        return self._record(
            av * bv,
            (a, b),
            lambda g: (
                _unbroadcast(g * bv, a.shape) if ra else None,
                _unbroadcast(g * av, b.shape) if rb else None,
            ),
        )

    def neg(self, a):
        return self._record(-a.values, (a,), lambda g: (-g,))

    def power(self, a, exponent):
        """Elementwise ``a ** exponent`` for a constant exponent."""
        p = float(exponent)
        av = a.values
        out = np.power(av, p)

        def backward(g):
            if p == 0.0:
                return (np.zeros_like(av),)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = p * np.power(av, p - 1.0)
            d = np.where(np.isfinite(d), d, 0.0)
            return (g * d,)

        return self._record(out, (a,), backward)

    def exp(self, a):
        out = np.exp(a.values)
        return self._record(out, (a,), lambda g: (g * out,))

    def log(self, a):
        av = a.values
        if np.any(av <= 0):
            raise NonFiniteError("log: non-positive input")
        return self._record(np.log(av), (a,), lambda g: (g / av,))

    def sqrt(self, a):
        out = np.sqrt(a.values)

        def backward(g):
            # subgradient 0 at the origin
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g / (2.0 * safe), 0.0),)

        return self._record(out, (a,), backward)

    def sin(self, a):
        av = a.values
        return self._record(np.sin(av), (a,), lambda g: (g * np.cos(av),))

    def cos(self, a):
        av = a.values
        return self._record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))

    def clip(self, a, lo, hi):
        av = a.values
        inside = (av >= lo) & (av <= hi)
        return self._record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))

    # ------------------------------------------------------------------
    # activations

    def relu(self, a):
        mask = a.values > 0
        return self._record(a.values * mask, (a,), lambda g: (g * mask,))

    def leaky_relu(self, a, slope=0.2):
        av = a.values
        scale = np.where(av > 0, 1.0, slope)
        return self._record(av * scale, (a,), lambda g: (g * scale,))

    def sigmoid(self, a):
        out = 1.0 / (1.0 + np.exp(-a.values))
        return self._record(out, (a,), lambda g: (g * out * (1.0 - out),))

    def dropout(self, a, mask):
        """Multiply by a pre-sampled (already rescaled) mask constant."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != a.shape:
            raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {a.shape}")
        return self._record(a.values * mask, (a,), lambda g: (g * mask,))

    # ------------------------------------------------------------------
    # structural ops

    def matmul(self, a, b):
        a, b = self.lift(a), self.lift(b)
        if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.values, b.values
        ra, rb = a.requires_grad, b.requires_grad
        return self._record(
            av @ bv,
            (a, b),
            lambda g: (g @ bv.T if ra else None, av.T @ g if rb else None),
        )

    def concat(self, tensors, axis=-1):
        tensors = [self.lift(t) for t in tensors]
        try:
            out = np.concatenate([t.values for t in tensors], axis=axis)
        except ValueError:
            shapes = ", ".join(str(t.shape) for t in tensors)
            raise ShapeError(f"concat: incompatible shapes {shapes}") from None
        splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        return self._record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))

    def getitem(self, a, key):
        if isinstance(key, np.ndarray) and key.dtype.kind in "iu":
            key = key.astype(np.int64)
        out = a.values[key]
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            return (full,)

        return self._record(np.array(out, copy=True), (a,), backward)

    def gather_rows(self, a, index):
        """``a[index]`` along axis 0, with a sparse scatter for the backward.

        ``index`` may be a :class:`Segments` over ``a``'s rows, which lets
        repeated gathers share one scatter matrix.
        """
        if isinstance(index, Segments):
            scatter = index
        else:
            scatter = Segments(index, a.shape[0])
        if scatter.n_segments != a.shape[0]:
            raise ShapeError(
                f"gather_rows: index built for {scatter.n_segments} rows, input has {a.shape[0]}"
            )
        return self._record(a.values[scatter.ids], (a,), lambda g: (scatter.reduce(g),))

    def reshape(self, a, shape):
        old = a.shape
        try:
            out = a.values.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
        return self._record(out, (a,), lambda g: (g.reshape(old),))

    def sum(self, a, axis=None):
        shape = a.shape
        out = a.values.sum(axis=axis)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._record(np.asarray(out), (a,), backward)

    def mean(self, a, axis=None):
        n = a.size if axis is None else a.shape[axis]
        return self.mul(self.sum(a, axis=axis), 1.0 / n)

    # ------------------------------------------------------------------
    # segmented reductions

    def segment_sum(self, a, segments):
        if a.shape[0] != len(segments):
            raise ShapeError(
                f"segment_sum: {a.shape[0]} rows but {len(segments)} segment ids"
            )
        ids = segments.ids
        return self._record(segments.reduce(a.values), (a,), lambda g: (g[ids],))

    def arc_aggregate(self, weights, values, dst, src):
        """``out[i] = sum_e weights[e] * values[src[e]]`` over arcs with ``dst[e] = i``.

        Same result as ``segment_sum(weights[:, None] * gather_rows(values, src), dst)``
        computed with one sparse product. ``dst`` and ``src`` are
        :class:`Segments` (``dst`` over output rows, ``src`` over ``values`` rows).
        """
        weights, values = self.lift(weights), self.lift(values)
        if weights.values.ndim != 1 or weights.shape[0] != len(dst) or len(src) != len(dst):
            raise ShapeError(
                f"arc_aggregate: weights shape {weights.shape} vs {len(dst)} arcs"
            )
        if values.shape[0] != src.n_segments:
            raise ShapeError(
                f"arc_aggregate: values have {values.shape[0]} rows, index expects {src.n_segments}"
            )
        A = dst.weighted_matrix(weights.values, src.ids, src.n_segments)
        vv = values.values
        rw, rv = weights.requires_grad, values.requires_grad

        def backward(g):
            gw = rowdot(g, vv, dst.ids, src.ids) if rw else None
            gv = np.asarray(A.T @ g) if rv else None
            return gw, gv

        return self._record(np.asarray(A @ vv), (weights, values), backward)

    def segment_softmax(self, a, segments):
        """Softmax of a 1-D logit vector within each segment."""
        if a.values.ndim != 1 or a.shape[0] != len(segments):
            raise ShapeError(
                f"segment_softmax: logits shape {a.shape} vs {len(segments)} segment ids"
            )
        ids = segments.ids
        shifted = a.values - segments.segment_max(a.values)[ids]
        ex = np.exp(shifted)
        denom = segments.reduce(ex)
        out = ex / denom[ids]

        def backward(g):
            dot = segments.reduce(g * out)
            return (out * (g - dot[ids]),)

        return self._record(out, (a,), backward)


# ----------------------------------------------------------------------
# generic dispatcher

_UNARY = {
    "neg", "exp", "log", "sqrt", "sin", "cos", "relu", "sigmoid",
}


def forward_op(kind, inputs, attrs=None):
    """Apply op ``kind`` to ``inputs`` (tensors on a shared tape).

    Mostly useful for table-driven tests; model code calls the tape
    methods directly.
    """
    attrs = dict(attrs or {})
    if not inputs:
        raise ValueError(f"{kind}: no inputs")
    tape = next((t.tape for t in inputs if isinstance(t, Tensor)), None)
    if tape is None:
        raise ValueError(f"{kind}: at least one input must be a Tensor")
    if kind in _UNARY:
        (a,) = inputs
        return getattr(tape, kind)(a)
    if kind in ("add", "sub", "mul", "matmul"):
        a, b = inputs
        return getattr(tape, kind)(a, b)
    if kind == "leaky_relu":
        return tape.leaky_relu(inputs[0], attrs.get("slope", 0.2))
    if kind == "power":
        return tape.power(inputs[0], attrs["exponent"])
    if kind == "concat":
        return tape.concat(inputs, attrs.get("axis", -1))
    if kind == "dropout":
        return tape.dropout(inputs[0], attrs["mask"])
    if kind == "segment_sum":
        return tape.segment_sum(inputs[0], attrs["segments"])
    if kind == "segment_softmax":
        return tape.segment_softmax(inputs[0], attrs["segments"])
    if kind == "sum":
        return tape.sum(inputs[0], attrs.get("axis"))
    if kind == "mean":
        return tape.mean(inputs[0], attrs.get("axis"))
    if kind == "arc_aggregate":
        return tape.arc_aggregate(inputs[0], inputs[1], attrs["dst"], attrs["src"])
    if kind == "gather_rows":
        return tape.gather_rows(inputs[0], attrs["index"])
    if kind == "clip":
        return tape.clip(inputs[0], attrs["lo"], attrs["hi"])
    raise ValueError(f"unknown op kind {kind!r}")


def dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: zeros with probability ``rate``, else 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(shape)
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def relative_error(a, b, floor=1e-6):
    """Elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(f, point, epsilon=1e-5, tolerance=None, floor=1e-6):
    """Compare the tape gradient of ``f`` with central differences.

    ``f(tape, x)`` must build a scalar tensor from the leaf ``x``. Returns the
    maximum relative error over coordinates (see :func:`relative_error`). If
    ``tolerance`` is given, an ``AssertionError`` is raised when exceeded.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    point = np.asarray(point, dtype=np.float64)

    def value_at(x, coord=None):
        tape = Tape()
        try:
            out = f(tape, tape.leaf(x))
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc} at coordinate {coord}", coord) from exc
        v = float(np.asarray(out.values).reshape(-1)[0])
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite value {v} at coordinate {coord}", coord)
        return v

    tape = Tape()
    x = tape.leaf(point)
    loss = f(tape, x)
    if not np.all(np.isfinite(loss.values)):
        raise NonFiniteError("non-finite value at the base point")
    if loss.requires_grad:
        tape.backward(loss)
        analytic = x.grad.copy()
    else:
        analytic = np.zeros_like(point)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for k in range(flat.size):
        coord = np.unravel_index(k, point.shape)
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += epsilon
        xm[k] -= epsilon
        fp = value_at(xp.reshape(point.shape), coord)
        fm = value_at(xm.reshape(point.shape), coord)
        numeric.reshape(-1)[k] = (fp - fm) / (2.0 * epsilon)

    err = relative_error(analytic, numeric, floor)
    worst = float(err.max()) if err.size else 0.0
    if tolerance is not None and worst >= tolerance:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e}")
    return worst
