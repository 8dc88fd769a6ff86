"""Reverse-mode automatic differentiation over numpy arrays.

A Tape records primitive operations in execution order (define-by-run).
Node values are float64 numpy arrays; batched data uses a leading batch
axis so one recorded op covers a whole minibatch.  backward() walks the
tape once in reverse and returns a gradient per registered Parameter.

Every primitive works on plain ndarrays too: if no Var participates the
op just computes and returns numpy values, so the same layer code serves
both the training path (taped) and the fast evaluation path (untaped).

All computation is float64 and single-threaded-deterministic: replaying
an identical op sequence yields bitwise identical gradients.
"""

from __future__ import annotations

import numpy as np

NORM_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    """Raised when an op receives input outside its differentiable domain."""


class Parameter:
    """Named trainable array. The name shows up in gradient diagnostics."""

    __slots__ = ("name", "data")

    def __init__(self, name, data):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Var:
    """A value recorded on a tape. Treat .value as read-only."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape):
        self.value = value
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(shape={self.shape})"


class Tape:
    """Ordered record of ops for one forward pass. Single use."""

    def __init__(self):
        self._nodes = []
        self._param_leaves = {}
        self._consumed = False

    def param(self, p: Parameter) -> Var:
        """Leaf Var for a Parameter, memoized per tape."""
        entry = self._param_leaves.get(id(p))
        if entry is None:
            leaf = Var(p.data, self)
            self._param_leaves[id(p)] = (p, leaf)
            return leaf
        return entry[1]

    def record(self, out, inputs, bwd):
        self._nodes.append((out, inputs, bwd))


def backward(loss: Var):
    """Gradients of a scalar loss wrt every Parameter on its tape.

    Parameters never touched by the loss get zero gradients.  A tape can
    be walked backward once; build a fresh tape per step.
    """
    if not isinstance(loss, Var):
        raise TypeError("backward expects a Var")
    if np.ndim(loss.value) != 0:
        raise ValueError("backward expects a scalar loss")
    tape = loss.tape
    if tape._consumed:
        raise RuntimeError("tape already walked backward; build a new one")
    tape._consumed = True
    loss.grad = np.float64(1.0)
    for out, inputs, bwd in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        for v, gv in zip(inputs, bwd(g)):
            if gv is None:
                continue
            v.grad = gv if v.grad is None else v.grad + gv
    return {
        p: (leaf.grad if leaf.grad is not None else np.zeros_like(p.data))
        for p, leaf in tape._param_leaves.values()
    }


# ---------------------------------------------------------------------------
# op plumbing

def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    av, bv = _val(a), _val(b)
    out_v = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash, bsh = np.shape(av), np.shape(bv)

    if isinstance(a, Var) and isinstance(b, Var):
        tape.record(out, (a, b),
                    lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))
    elif isinstance(a, Var):
        tape.record(out, (a,), lambda g: (_unbroadcast(g, ash),))
    else:
        tape.record(out, (b,), lambda g: (_unbroadcast(g, bsh),))
    return out


def sub(a, b):
    av, bv = _val(a), _val(b)
    out_v = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash, bsh = np.shape(av), np.shape(bv)

    if isinstance(a, Var) and isinstance(b, Var):
        tape.record(out, (a, b),
                    lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))
    elif isinstance(a, Var):
        tape.record(out, (a,), lambda g: (_unbroadcast(g, ash),))
    else:
        tape.record(out, (b,), lambda g: (_unbroadcast(-g, bsh),))
    return out


def neg(a):
    av = _val(a)
    tape = _tape_of(a)
    if tape is None:
        return -av
    out = Var(-av, tape)
    tape.record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b):
    av, bv = _val(a), _val(b)
    out_v = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash, bsh = np.shape(av), np.shape(bv)

    if isinstance(a, Var) and isinstance(b, Var):
        tape.record(out, (a, b),
                    lambda g: (_unbroadcast(g * bv, ash),
                               _unbroadcast(g * av, bsh)))
    elif isinstance(a, Var):
        tape.record(out, (a,), lambda g: (_unbroadcast(g * bv, ash),))
    else:
        tape.record(out, (b,), lambda g: (_unbroadcast(g * av, bsh),))
    return out


def div(a, b):
    av, bv = _val(a), _val(b)
    out_v = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash, bsh = np.shape(av), np.shape(bv)

    if isinstance(a, Var) and isinstance(b, Var):
        tape.record(out, (a, b),
                    lambda g: (_unbroadcast(g / bv, ash),
                               _unbroadcast(-g * av / (bv * bv), bsh)))
    elif isinstance(a, Var):
        tape.record(out, (a,), lambda g: (_unbroadcast(g / bv, ash),))
    else:
        tape.record(out, (b,),
                    lambda g: (_unbroadcast(-g * av / (bv * bv), bsh),))
    return out


def power(a, p):
    """a**p for a constant exponent p."""
    av = _val(a)
    out_v = av ** p
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    tape.record(out, (a,), lambda g: (g * p * av ** (p - 1),))
    return out


# ---------------------------------------------------------------------------
# elementwise transcendentals

def log(a):
    av = _val(a)
    tape = _tape_of(a)
    if tape is None:
        return np.log(av)
    out = Var(np.log(av), tape)
    tape.record(out, (a,), lambda g: (g / av,))
    return out


def log_abs(a):
    """log|a|; gradient 1/a (valid away from 0)."""
    av = _val(a)
    tape = _tape_of(a)
    if tape is None:
        return np.log(np.abs(av))
    out = Var(np.log(np.abs(av)), tape)
    tape.record(out, (a,), lambda g: (g / av,))
    return out


def exp(a):
    av = _val(a)
    out_v = np.exp(av)
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    tape.record(out, (a,), lambda g: (g * out_v,))
    return out


def sqrt(a):
    av = _val(a)
    out_v = np.sqrt(av)
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    tape.record(out, (a,), lambda g: (g * 0.5 / out_v,))
    return out


def sin(a):
    av = _val(a)
    tape = _tape_of(a)
    if tape is None:
        return np.sin(av)
    out = Var(np.sin(av), tape)
    tape.record(out, (a,), lambda g: (g * np.cos(av),))
    return out


def cos(a):
    av = _val(a)
    tape = _tape_of(a)
    if tape is None:
        return np.cos(av)
    out = Var(np.cos(av), tape)
    tape.record(out, (a,), lambda g: (-g * np.sin(av),))
    return out


def atan2(y, x):
    yv, xv = _val(y), _val(x)
    out_v = np.arctan2(yv, xv)
    tape = _tape_of(y, x)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ysh, xsh = np.shape(yv), np.shape(xv)
    d = xv * xv + yv * yv

    if isinstance(y, Var) and isinstance(x, Var):
        tape.record(out, (y, x),
                    lambda g: (_unbroadcast(g * xv / d, ysh),
                               _unbroadcast(-g * yv / d, xsh)))
    elif isinstance(y, Var):
        tape.record(out, (y,), lambda g: (_unbroadcast(g * xv / d, ysh),))
    else:
        tape.record(out, (x,), lambda g: (_unbroadcast(-g * yv / d, xsh),))
    return out


def relu(a):
    av = _val(a)
    out_v = np.maximum(av, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    mask = av > 0.0
    tape.record(out, (a,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# reductions and vector ops

def sum_(a, axis=None, keepdims=False):
    av = _val(a)
    out_v = np.sum(av, axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash = np.shape(av)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, ash),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ash),)

    tape.record(out, (a,), bwd)
    return out


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along one axis. Errors on near-zero input."""
    av = _val(a)
    out_v = np.sqrt(np.sum(av * av, axis=axis, keepdims=keepdims))
    if np.min(out_v) < NORM_FLOOR:
        raise DegenerateInputError("norm of near-zero vector")
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)

    def bwd(g):
        if keepdims:
            return (g / out_v * av,)
        return (np.expand_dims(g / out_v, axis) * av,)

    tape.record(out, (a,), bwd)
    return out


def normalize(a, axis=-1):
    """a / ||a|| along one axis. Errors on near-zero input."""
    av = _val(a)
    n = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))
    if np.min(n) < NORM_FLOOR:
        raise DegenerateInputError("normalize of near-zero vector")
    out_v = av / n
    tape = _tape_of(a)
    if tape is None:
        return out_v

    out = Var(out_v, tape)

    def bwd(g):
        proj = np.sum(g * out_v, axis=axis, keepdims=True)
        return ((g - proj * out_v) / n,)

    tape.record(out, (a,), bwd)
    return out


def shrink_to_ball(a, radius):
    """radius * a / (1 + ||a||): smooth bijection of R^3 onto the open ball.

    One primitive rather than a norm/div composite so the gradient is the
    exact analytic Jacobian, which extends continuously through a = 0
    (the plain norm op is undefined there).
    """
    av = _val(a)
    n = np.sqrt(np.sum(av * av, axis=-1, keepdims=True))
    out_v = radius * av / (1.0 + n)
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)

    def bwd(g):
        safe_n = np.where(n > NORM_FLOOR, n, 1.0)
        coef = np.sum(g * av, axis=-1, keepdims=True) / (safe_n * (1.0 + n) ** 2)
        coef = np.where(n > NORM_FLOOR, coef, 0.0)
        return (radius * (g / (1.0 + n) - coef * av),)

    tape.record(out, (a,), bwd)
    return out


def dot(a, b, keepdims=False):
    """Inner product along the last axis."""
    return sum_(mul(a, b), axis=-1, keepdims=keepdims)


def cross(a, b):
    """Cross product along the last axis (3-vectors)."""
    av, bv = _val(a), _val(b)
    out_v = np.cross(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash, bsh = np.shape(av), np.shape(bv)

    # d(a x b) applied to upstream g: grad_a = b x g, grad_b = g x a
    if isinstance(a, Var) and isinstance(b, Var):
        tape.record(out, (a, b),
                    lambda g: (_unbroadcast(np.cross(bv, g), ash),
                               _unbroadcast(np.cross(g, av), bsh)))
    elif isinstance(a, Var):
        tape.record(out, (a,), lambda g: (_unbroadcast(np.cross(bv, g), ash),))
    else:
        tape.record(out, (b,), lambda g: (_unbroadcast(np.cross(g, av), bsh),))
    return out


def softmax(a, axis=-1):
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    out_v = e / np.sum(e, axis=axis, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)

    def bwd(g):
        inner = np.sum(g * out_v, axis=axis, keepdims=True)
        return ((g - inner) * out_v,)

    tape.record(out, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Matrix product; operands must be >= 2-D (batch axes broadcast)."""
    av, bv = _val(a), _val(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out_v = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash, bsh = np.shape(av), np.shape(bv)
    at = av.swapaxes(-1, -2)
    bt = bv.swapaxes(-1, -2)

    if isinstance(a, Var) and isinstance(b, Var):
        tape.record(out, (a, b),
                    lambda g: (_unbroadcast(g @ bt, ash),
                               _unbroadcast(at @ g, bsh)))
    elif isinstance(a, Var):
        tape.record(out, (a,), lambda g: (_unbroadcast(g @ bt, ash),))
    else:
        tape.record(out, (b,), lambda g: (_unbroadcast(at @ g, bsh),))
    return out


def matvec(m, v):
    """Batched matrix-vector product: (..., i, j) x (..., j) -> (..., i)."""
    mv, vv = _val(m), _val(v)
    out_v = np.einsum("...ij,...j->...i", mv, vv)
    tape = _tape_of(m, v)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    msh, vsh = np.shape(mv), np.shape(vv)

    def grad_m(g):
        return _unbroadcast(g[..., :, None] * vv[..., None, :], msh)

    def grad_v(g):
        return _unbroadcast(np.einsum("...ij,...i->...j", mv, g), vsh)

    if isinstance(m, Var) and isinstance(v, Var):
        tape.record(out, (m, v), lambda g: (grad_m(g), grad_v(g)))
    elif isinstance(m, Var):
        tape.record(out, (m,), lambda g: (grad_m(g),))
    else:
        tape.record(out, (v,), lambda g: (grad_v(g),))
    return out


def det(a):
    """Determinant of (..., n, n); inputs must be comfortably invertible."""
    av = _val(a)
    out_v = np.linalg.det(av)
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    inv_t = np.linalg.inv(av).swapaxes(-1, -2)

    def bwd(g):
        return ((g * out_v)[..., None, None] * inv_t,)

    tape.record(out, (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# shape and indexing

def reshape(a, shape):
    av = _val(a)
    tape = _tape_of(a)
    if tape is None:
        return np.reshape(av, shape)
    out = Var(np.reshape(av, shape), tape)
    ash = np.shape(av)
    tape.record(out, (a,), lambda g: (np.reshape(g, ash),))
    return out


def take(a, key):
    """Basic (non-repeating) indexing, e.g. a column slice."""
    av = _val(a)
    out_v = av[key]
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash = np.shape(av)

    def bwd(g):
        full = np.zeros(ash)
        full[key] = g
        return (full,)

    tape.record(out, (a,), bwd)
    return out


def gather(a, idx):
    """Select rows along axis 0 by integer index (repeats allowed)."""
    av = _val(a)
    out_v = av[idx]
    tape = _tape_of(a)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    ash = np.shape(av)

    def bwd(g):
        full = np.zeros(ash)
        np.add.at(full, idx, g)
        return (full,)

    tape.record(out, (a,), bwd)
    return out


def scatter(values, idx, length):
    """Place rows at positions idx (unique) of a zero array of `length` rows."""
    vv = _val(values)
    out_v = np.zeros((length,) + vv.shape[1:])
    out_v[idx] = vv
    tape = _tape_of(values)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    tape.record(out, (values,), lambda g: (g[idx],))
    return out


def stack(items, axis=-1):
    vals = [_val(x) for x in items]
    out_v = np.stack(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    var_pos = [i for i, x in enumerate(items) if isinstance(x, Var)]
    inputs = tuple(items[i] for i in var_pos)

    def bwd(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in var_pos)

    tape.record(out, inputs, bwd)
    return out


def concat(items, axis=-1):
    vals = [_val(x) for x in items]
    out_v = np.concatenate(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out_v
    out = Var(out_v, tape)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    var_pos = [i for i, x in enumerate(items) if isinstance(x, Var)]
    inputs = tuple(items[i] for i in var_pos)
    nd = out_v.ndim
    ax = axis % nd

    def bwd(g):
        grads = []
        for i in var_pos:
            sl = [slice(None)] * nd
            sl[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    tape.record(out, inputs, bwd)
    return out


# registry so callers can record by name: record("square", x)
def square(a):
    return mul(a, a)


PRIMITIVES = {
    "add": add, "sub": sub, "neg": neg, "mul": mul, "div": div,
    "power": power, "log": log, "log_abs": log_abs, "exp": exp,
    "sqrt": sqrt, "sin": sin, "cos": cos, "atan2": atan2, "relu": relu,
    "sum": sum_, "mean": mean, "norm": norm, "normalize": normalize,
    "shrink_to_ball": shrink_to_ball, "dot": dot, "cross": cross,
    "softmax": softmax, "matmul": matmul, "matvec": matvec, "det": det,
    "reshape": reshape, "take": take, "gather": gather, "scatter": scatter,
    "stack": stack, "concat": concat, "square": square,
}


def record(op, *inputs, **kwargs):
    """Apply a primitive by name; records on the inputs' tape if any."""
    return PRIMITIVES[op](*inputs, **kwargs)
