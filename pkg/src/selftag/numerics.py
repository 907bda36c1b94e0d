"""Differentiable tensor core plus the scalar information-theory helpers.

Everything downstream (the tagger, the losses, the self-training loop) runs on
the small reverse-mode engine in this module: float64 numpy arrays for storage,
a per-step tape that records backward closures in forward execution order, and
a finite-difference oracle to audit any gradient the engine produces.
"""

from __future__ import annotations

import math
import threading
import zlib

import numpy as np

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6

_TLS = threading.local()


def _active_tape():
    return getattr(_TLS, "tape", None)


# ---------------------------------------------------------------------------
# scalar helpers (plain numpy, no gradients)
# ---------------------------------------------------------------------------

def _check_simplex(p, name="p"):
    if p.ndim != 1 or p.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-D probability vector")
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries: {p}")
    total = float(p.sum())
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} does not sum to 1 (got {total!r})")


def entropy(p):
    """Shannon entropy -sum(p ln p) in nats; 0*ln(0) counts as 0."""
    p = np.asarray(p, dtype=np.float64)
    _check_simplex(p)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def log_sum_exp(x):
    """Stable ln(sum(exp(x))) of a non-empty 1-D vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("log_sum_exp expects a non-empty 1-D vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("log_sum_exp expects finite entries")
    m = float(x.max())
    return m + float(np.log(np.exp(x - m).sum()))


def kl_divergence(p, q):
    """sum(p ln(p/q)) in nats. Rejects support violations (p>0 where q=0)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("p and q must have equal length")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    support = p > 0.0
    if np.any(q[support] == 0.0):
        raise ValueError("q has zero mass where p is positive; clamp upstream")
    ps = p[support]
    return float((ps * np.log(ps / q[support])).sum())


def clamp_probs(p):
    """Clamp probabilities to [PROB_FLOOR, 1] before taking logs."""
    return np.clip(p, PROB_FLOOR, 1.0)


def rng_stream(seed, *key):
    """Independently seeded generator for one component of a run.

    The same (seed, key) always yields the same stream, so e.g. dropout masks
    can be replayed without touching the data-order or noise streams.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    words = [int(seed)]
    for part in key:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            words.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# reverse-mode engine
# ---------------------------------------------------------------------------

class Tensor:
    """A float64 array with an optional gradient buffer of the same shape."""

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = grad

    @classmethod
    def param(cls, values):
        v = np.array(values, dtype=np.float64)
        return cls(v, np.zeros_like(v))

    @property
    def shape(self):
        return self.values.shape

    def detach(self):
        return Tensor(self.values)

    def __float__(self):
        return float(self.values)

    def __repr__(self):
        tracked = "tracked" if self.grad is not None else "const"
        return f"Tensor(shape={self.values.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.values.size if axis is None else self.values.shape[axis]
        return mul(reduce_sum(self, axis=axis), 1.0 / n)


class Tape:
    """Ordered record of the backward closures for one training step.

    Closures are appended in forward execution order, which is a topological
    order of the computation, so replaying them reversed applies the chain
    rule exactly once per operation.
    """

    __slots__ = ("_steps", "_replayed")

    def __init__(self):
        self._steps = []
        self._replayed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False

    def __len__(self):
        return len(self._steps)

    def backward(self, loss):
        if self._replayed:
            raise RuntimeError("tape already replayed")
        if loss.values.shape != ():
            raise ValueError("backward expects a scalar loss")
        if loss.grad is None:
            raise ValueError("loss is not connected to any tracked parameter")
        self._replayed = True
        loss.grad[...] = 1.0
        for step in reversed(self._steps):
            step()


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _track(values, inputs, backward):
    """Return a const result, or a tracked one with `backward` on the tape."""
    tape = _active_tape()
    if tape is None or not any(t.grad is not None for t in inputs):
        return Tensor(values)
    out = Tensor(values, np.zeros_like(values))
    tape._steps.append(backward(out))
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(out):
        def step():
            if a.grad is not None:
                a.grad += _unbroadcast(out.grad, a.grad.shape)
            if b.grad is not None:
                b.grad += _unbroadcast(out.grad, b.grad.shape)
        return step

    return _track(a.values + b.values, (a, b), backward)


def neg(a):
    a = _wrap(a)

    def backward(out):
        def step():
            a.grad -= out.grad
        return step

    return _track(-a.values, (a,), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(out):
        def step():
            if a.grad is not None:
                a.grad += _unbroadcast(out.grad * b.values, a.grad.shape)
            if b.grad is not None:
                b.grad += _unbroadcast(out.grad * a.values, b.grad.shape)
        return step

    return _track(a.values * b.values, (a, b), backward)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(out):
        def step():
            if a.grad is not None:
                a.grad += out.grad @ b.values.T
            if b.grad is not None:
                b.grad += a.values.T @ out.grad
        return step

    return _track(a.values @ b.values, (a, b), backward)


def exp(a):
    a = _wrap(a)
    y = np.exp(a.values)

    def backward(out):
        def step():
            a.grad += out.grad * out.values
        return step

    return _track(y, (a,), backward)


def log(a):
    a = _wrap(a)

    def backward(out):
        def step():
            a.grad += out.grad / a.values
        return step

    return _track(np.log(a.values), (a,), backward)


def tanh(a):
    a = _wrap(a)
    y = np.tanh(a.values)

    def backward(out):
        def step():
            a.grad += out.grad * (1.0 - out.values ** 2)
        return step

    return _track(y, (a,), backward)


def sigmoid(a):
    a = _wrap(a)
    y = 0.5 * (np.tanh(0.5 * a.values) + 1.0)

    def backward(out):
        def step():
            a.grad += out.grad * out.values * (1.0 - out.values)
        return step

    return _track(y, (a,), backward)


def relu(a):
    a = _wrap(a)

    def backward(out):
        def step():
            a.grad += out.grad * (a.values > 0.0)
        return step

    return _track(np.maximum(a.values, 0.0), (a,), backward)


def softplus(a):
    a = _wrap(a)
    y = np.logaddexp(0.0, a.values)

    def backward(out):
        def step():
            a.grad += out.grad * (0.5 * (np.tanh(0.5 * a.values) + 1.0))
        return step

    return _track(y, (a,), backward)


def clip(a, lo, hi):
    a = _wrap(a)
    y = np.clip(a.values, lo, hi)

    def backward(out):
        inside = (a.values >= lo) & (a.values <= hi)

        def step():
            a.grad += out.grad * inside
        return step

    return _track(y, (a,), backward)


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    y = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        def step():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.grad.shape)
        return step

    return _track(y, (a,), backward)


def logsumexp(a, axis=-1, keepdims=False):
    """Stable ln(sum(exp(a))) along one axis; backward is the softmax."""
    a = _wrap(a)
    m = np.max(a.values, axis=axis, keepdims=True)
    shifted = np.exp(a.values - m)
    total = shifted.sum(axis=axis, keepdims=True)
    y = m + np.log(total)
    if not keepdims:
        y = np.squeeze(y, axis=axis)

    def backward(out):
        soft = shifted / total

        def step():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += g * soft
        return step

    return _track(y, (a,), backward)


def log_softmax(a, axis=-1):
    return add(a, neg(logsumexp(a, axis=axis, keepdims=True)))


def embedding_rows(table, indices):
    """Rows of a (V, d) parameter table; scatter-adds gradients on backward."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(out):
        def step():
            np.add.at(table.grad, idx, out.grad)
        return step

    return _track(table.values[idx], (table,), backward)


def pick_per_row(mat, cols):
    """mat[j, cols[j]] for every row j, as a vector."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(mat.values.shape[0])

    def backward(out):
        def step():
            np.add.at(mat.grad, (rows, cols), out.grad)
        return step

    return _track(mat.values[rows, cols], (mat,), backward)


def gather_pairs(mat, rows, cols):
    """mat[rows[j], cols[j]] as a vector; indices may repeat."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(out):
        def step():
            np.add.at(mat.grad, (rows, cols), out.grad)
        return step

    return _track(mat.values[rows, cols], (mat,), backward)


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    y = np.concatenate([p.values for p in parts], axis=axis)

    def backward(out):
        sizes = [p.values.shape[axis] for p in parts]

        def step():
            offset = 0
            for p, size in zip(parts, sizes):
                if p.grad is not None:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(offset, offset + size)
                    p.grad += out.grad[tuple(sl)]
                offset += size
        return step

    return _track(y, parts, backward)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    a = _wrap(a)
    sl = [slice(None)] * a.values.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(out):
        def step():
            a.grad[sl] += out.grad
        return step

    return _track(a.values[sl].copy(), (a,), backward)


def flip(a, axis=0):
    a = _wrap(a)

    def backward(out):
        def step():
            a.grad += np.flip(out.grad, axis=axis)
        return step

    return _track(np.flip(a.values, axis=axis).copy(), (a,), backward)


def transpose(a):
    a = _wrap(a)

    def backward(out):
        def step():
            a.grad += out.grad.T
        return step

    return _track(a.values.T.copy(), (a,), backward)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad_check(f, params, epsilon=1e-5):
    """Max relative error between reverse-mode and central-difference grads.

    `f` takes no arguments, closes over `params` (one Tensor or a sequence of
    parameter Tensors) and returns a scalar Tensor. It must be deterministic:
    any randomness inside has to be re-seeded identically on every call.
    Error per coordinate is |analytic - fd| / max(1, |fd|).
    """
    tensors = [params] if isinstance(params, Tensor) else list(params)
    for t in tensors:
        if t.grad is None:
            raise ValueError("finite_diff_grad_check needs parameter tensors")
        t.grad[...] = 0.0

    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.values):
        raise FloatingPointError("non-finite loss at the base point")
    tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, grads in zip(tensors, analytic):
        flat = t.values.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f().values)
            flat[i] = orig - epsilon
            lo = float(f().values)
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError("non-finite loss at a probe point")
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(gflat[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
