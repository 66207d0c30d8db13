"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active,
every operation whose inputs require gradients appends an entry holding a
closure that maps the output gradient to input gradients. ``backward``
replays the entries in reverse creation order, which is a valid reverse
topological order because inputs always exist before their consumers.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64
# additive surrogate for -inf in masked softmax
MASK_FILL = -1e30


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")
    # make ndarray (op) Tensor dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable tensor. Gradients accumulate into ``grad`` across uses."""

    __slots__ = ()

    def __init__(self, value, name=""):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded. Nesting is allowed, only the innermost tape records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.entries = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.entries)


def _active_tape():
    return Tape._stack[-1] if Tape._stack else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, inputs, out_value, backward_fn):
    out = Tensor(out_value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append((op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor, tape: Tape):
    """Accumulate d(root)/d(param) into ``param.grad`` for every Parameter on the tape."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.value)}
    for op, inputs, out, fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if isinstance(t, Parameter):
                t.grad += gi
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.value + b.value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.value - b.value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record("mul", (a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return _record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = as_tensor(a)
    return _record("transpose", (a,), a.value.T, lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def getitem(a, key):
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return _record("getitem", (a,), a.value[key], fn)


def take_rows(a, index):
    """Gather rows ``a[index]`` (embedding lookup); repeated indices accumulate."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _record("take_rows", (a,), a.value[index], fn)


def segment_sum(a, segment_ids, n_segments):
    """Sum rows of ``a`` into ``n_segments`` buckets (scatter-add)."""
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((n_segments,) + a.shape[1:], dtype=DTYPE)
    np.add.at(out, segment_ids, a.value)
    return _record("segment_sum", (a,), out, lambda g: (g[segment_ids],))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", tuple(tensors),
                   np.concatenate([t.value for t in tensors], axis=axis),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", tuple(tensors), np.stack([t.value for t in tensors], axis=axis), fn)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), a.value.sum(axis=axis, keepdims=keepdims), fn)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


# --- nonlinearities ------------------------------------------------------------

def sigmoid(x):
    x = as_tensor(x)
    # two-branch form avoids overflow in exp for large |x|
    v = x.value
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


class KinkMonitor:
    """Records the sign pattern of every relu/leaky_relu input while active."""

    _active: list["KinkMonitor"] = []

    def __init__(self):
        self.patterns = []

    def __enter__(self):
        KinkMonitor._active.append(self)
        return self

    def __exit__(self, *exc):
        KinkMonitor._active.pop()
        return False

    def same_side(self, other):
        return len(self.patterns) == len(other.patterns) and all(
            np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


def _note_kinks(v):
    if KinkMonitor._active:
        KinkMonitor._active[-1].patterns.append(v > 0)


def relu(x):
    x = as_tensor(x)
    _note_kinks(x.value)
    live = x.value > 0
    return _record("relu", (x,), np.where(live, x.value, 0.0), lambda g: (g * live,))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    _note_kinks(x.value)
    live = x.value >= 0
    scale = np.where(live, 1.0, slope)
    return _record("leaky_relu", (x,), x.value * scale, lambda g: (g * scale,))


def log(x, floor=0.0):
    """Natural log with the argument clamped below at ``floor``.

    Clamped entries get zero gradient.
    """
    x = as_tensor(x)
    v = x.value
    clamped = np.maximum(v, floor) if floor > 0 else v
    live = v >= floor
    return _record("log", (x,), np.log(clamped), lambda g: (np.where(live, g / clamped, 0.0),))


# --- normalisation --------------------------------------------------------------

def softmax_masked(scores, mask, axis=-1):
    """Softmax along ``axis`` restricted to entries where ``mask`` is true.

    Masked entries come out exactly zero. Every slice must have at least one
    live entry.
    """
    scores = as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("softmax_masked: a slice has no unmasked entries")
    z = np.where(mask, scores.value, MASK_FILL)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("softmax_masked", (scores,), p, fn)


def segment_softmax(scores, segment_ids, n_segments):
    """Softmax of a flat score vector within each segment.

    Used for attention over each receiving node's incoming edges.
    """
    scores = as_tensor(scores)
    seg = np.asarray(segment_ids, dtype=np.int64)
    v = scores.value
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, seg, v)
    e = np.exp(v - seg_max[seg])
    denom = np.zeros(n_segments)
    np.add.at(denom, seg, e)
    p = e / denom[seg]

    def fn(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, seg, g * p)
        return (p * (g - dot[seg]),)

    return _record("segment_softmax", (scores,), p, fn)


# --- stochastic -----------------------------------------------------------------

def dropout_mask(shape, rate, rng):
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate, training, rng=None, mask=None):
    """Inverted dropout. Identity when not training. ``mask`` fixes the draw."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0:
        return x
    if mask is None:
        mask = dropout_mask(x.shape, rate, rng)
    return mul(x, mask)


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# --- gradient checking ------------------------------------------------------------

def analytic_grads(fn, params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = fn()
    backward(out, tape)
    return [p.grad.copy() for p in params]


def finite_diff_check(fn, params, step=1e-5, n_samples=None, rng=None, per_param=False,
                      skipped=None):
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``fn`` takes no arguments and reads the current parameter values. When
    ``n_samples`` is given, that many coordinates are drawn uniformly across
    all parameters; otherwise every coordinate is checked. Coordinates whose
    +/- step evaluations put some relu/leaky_relu input on different sides
    of zero straddle a kink and are skipped (appended to ``skipped`` if a
    list is passed). Returns the max of ``|analytic - numeric| / max(1e-8,
    |numeric|)``, or a dict name -> max error when ``per_param`` is set.
    """
    grads = analytic_grads(fn, params)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng if rng is not None else make_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    errors = {}
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        with KinkMonitor() as mon_hi:
            hi = float(fn().value)
        flat[j] = orig - step
        with KinkMonitor() as mon_lo:
            lo = float(fn().value)
        flat[j] = orig
        key = params[i].name or str(i)
        if not mon_hi.same_side(mon_lo):
            if skipped is not None:
                skipped.append((key, j))
            continue
        numeric = (hi - lo) / (2 * step)
        analytic = grads[i].reshape(-1)[j]
        err = abs(analytic - numeric) / max(1e-8, abs(numeric))
        errors[key] = max(errors.get(key, 0.0), err)
    if per_param:
        return errors
    return max(errors.values(), default=0.0)
