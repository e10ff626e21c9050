"""Reverse-mode automatic differentiation on an append-only tape.

Every node holds a float64 numpy array (0-d for scalars), so a node is a
batch of scalar nodes sharing one elementary operation. Elementwise ops
broadcast like numpy; gradients are summed back to operand shapes.

All functions in this module accept plain arrays as well as :class:`Var`.
Without any ``Var`` operand they simply evaluate with numpy and record
nothing, which lets the renderer share one code path between taped
evaluation and cheap forward-only passes.

Example::

    tape = Tape()
    x = tape.leaf(2.0)
    y = tape.leaf(3.0)
    grads = tape.backward(x * y)
    grads[x], grads[y]   # (3.0, 2.0)
"""

from dataclasses import dataclass

import numpy as np

EXP_CLAMP = 60.0
LOG_FLOOR = 1e-300
SMOOTH_ABS_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    pass


class TapeError(ValueError):
    pass


class Var:
    """Handle to a differentiable array recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value", "op", "parents", "vjp", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape, value, op, parents=(), vjp=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    def __repr__(self):
        return f"Var(op={self.op!r}, index={self.index}, shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Gradients(dict):
    """Mapping ``Var -> ndarray`` of adjoints for the requires-grad leaves."""


class Tape:
    """Append-only record of operations; nodes are stored in topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=True):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError("leaf value must be finite")
        return Var(self, value, "leaf", requires_grad=requires_grad)

    def constant(self, value):
        return self.leaf(value, requires_grad=False)

    def backward(self, output, seed=None):
        """Propagate adjoints from ``output`` back to every requires-grad leaf.

        ``output`` must be a single-element node unless ``seed`` (an array of
        the output's shape) is given. Leaves the output does not depend on get
        zero adjoints; leaves created with ``requires_grad=False`` are omitted.
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise TapeError("output is not a node of this tape")
        if seed is None:
            if output.size != 1:
                raise TapeError("backward of a non-scalar output needs an explicit seed")
            seed = np.ones_like(output.value)
        else:
            seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), output.shape).copy()

        adjoints = {output.index: seed}
        grads = Gradients()
        for node in reversed(self.nodes[: output.index + 1]):
            g = adjoints.pop(node.index, None)
            if node.op == "leaf":
                if node.requires_grad:
                    grads[node] = g if g is not None else np.zeros_like(node.value)
                continue
            if g is None or not node.requires_grad:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Var) or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                prev = adjoints.get(parent.index)
                adjoints[parent.index] = pg if prev is None else prev + pg
        return grads


def leaf(tape, value, requires_grad=True):
    return tape.leaf(value, requires_grad)


def backward(tape, output, seed=None):
    return tape.backward(output, seed)


def value_of(x):
    """Plain ndarray value of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def is_var(x):
    return isinstance(x, Var)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands belong to different tapes")
    return tape


def _unbroadcast(g, shape):
    g = np.asarray(g, dtype=np.float64)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _record(op, value, parents, vjp):
    tape = _tape_of(*parents)
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    grad = any(isinstance(p, Var) and p.requires_grad for p in parents)
    if not grad:
        return Var(tape, value, op)
    return Var(tape, value, op, parents, vjp, requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    if not (is_var(a) or is_var(b)):
        return np.add(a, b)
    return _record("add", value_of(a) + value_of(b), (a, b), lambda g: (g, g))


def subtract(a, b):
    if not (is_var(a) or is_var(b)):
        return np.subtract(a, b)
    return _record("subtract", value_of(a) - value_of(b), (a, b), lambda g: (g, -g))


def multiply(a, b):
    if not (is_var(a) or is_var(b)):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    return _record("multiply", av * bv, (a, b), lambda g: (g * bv, g * av))


def divide(a, b):
    if not (is_var(a) or is_var(b)):
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _record("divide", out, (a, b), lambda g: (g / bv, -g * out / bv))


def negate(a):
    if not is_var(a):
        return np.negative(a)
    return _record("negate", -a.value, (a,), lambda g: (-g,))


def power(a, exponent):
    """``a ** exponent``; a Var exponent is handled as ``exp(exponent * log(a))``."""
    if is_var(exponent):
        return exp(multiply(exponent, log(a)))
    p = float(exponent)
    if not is_var(a):
        return np.power(a, p)
    av = a.value
    out = np.power(av, p)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(av, p - 1.0)
        return (g * np.where(np.isfinite(d), d, 0.0),)

    return _record("power", out, (a,), vjp)


def absolute(a):
    """Plain |a| with subgradient sign(a) (0 at 0)."""
    if not is_var(a):
        return np.abs(a)
    av = a.value
    return _record("absolute", np.abs(av), (a,), lambda g: (g * np.sign(av),))


# ---------------------------------------------------------------------------
# elementary functions


def exp(a, clamp=True):
    """exp with its argument clamped to [-EXP_CLAMP, EXP_CLAMP].

    ``clamp=False`` is for arguments known to be <= 0 (underflow to 0 is harmless).
    """
    av = value_of(a)
    clipped = np.clip(av, -EXP_CLAMP, EXP_CLAMP) if clamp else av
    out = np.exp(clipped)
    if not is_var(a):
        return out
    inside = (av == clipped).astype(np.float64)
    return _record("exp", out, (a,), lambda g: (g * out * inside,))


def log(a):
    """Natural log with the argument lifted to LOG_FLOOR (for quantities known to be >= 0)."""
    av = value_of(a)
    lifted = np.maximum(av, LOG_FLOOR)
    out = np.log(lifted)
    if not is_var(a):
        return out
    active = (av > LOG_FLOOR).astype(np.float64)
    return _record("log", out, (a,), lambda g: (g * active / lifted,))


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(np.maximum(av, 0.0))
    if not is_var(a):
        return out

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return _record("sqrt", out, (a,), vjp)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def sigmoid(a):
    out = _sigmoid(value_of(a))
    if not is_var(a):
        return out
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(a)), overflow-free."""
    av = value_of(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    if not is_var(a):
        return out
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def log_sigmoid(a):
    """log(sigmoid(a)) = -softplus(-a), exact far into both tails."""
    av = value_of(a)
    out = np.minimum(av, 0.0) - np.log1p(np.exp(-np.abs(av)))
    if not is_var(a):
        return out
    return _record("log_sigmoid", out, (a,), lambda g: (g * _sigmoid(-av),))


def smooth_abs(a, eps=SMOOTH_ABS_EPS):
    """sqrt(a^2 + eps^2): a C-infinity stand-in for |a|."""
    av = value_of(a)
    out = np.sqrt(av * av + eps * eps)
    if not is_var(a):
        return out
    return _record("smooth_abs", out, (a,), lambda g: (g * av / out,))


def logaddexp(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.logaddexp(av, bv)
    if not (is_var(a) or is_var(b)):
        return out
    return _record(
        "logaddexp", out, (a, b), lambda g: (g * np.exp(av - out), g * np.exp(bv - out))
    )


# ---------------------------------------------------------------------------
# reductions and softmax family


def sum_(a, axis=None):
    if not is_var(a):
        return np.sum(a, axis=axis)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", np.sum(a.value, axis=axis), (a,), vjp)


def mean(a, axis=None):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return sum_(a, axis) / float(n)


def _max_shift(av, axis):
    m = np.max(av, axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def logsumexp(a, axis=None):
    av = value_of(a)
    m = _max_shift(av, axis)
    out_keep = m + np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True))
    out = out_keep.reshape(()) if axis is None else np.squeeze(out_keep, axis=axis)
    if not is_var(a):
        return out
    w = np.exp(av - out_keep)

    def vjp(g):
        g = np.expand_dims(g, axis) if axis is not None else g
        return (g * w,)

    return _record("logsumexp", out, (a,), vjp)


def softmax(a, axis=-1):
    av = value_of(a)
    e = np.exp(av - _max_shift(av, axis))
    w = e / np.sum(e, axis=axis, keepdims=True)
    if not is_var(a):
        return w

    def vjp(g):
        return (w * (g - np.sum(w * g, axis=axis, keepdims=True)),)

    return _record("softmax", w, (a,), vjp)


def soft_min(a, temperature, axis=-1):
    """Softmin-weighted average of ``a``; tends to min(a) as temperature grows."""
    w = softmax(-float(temperature) * a, axis=axis)
    return sum_(w * a, axis=axis)


def segment_sum(a, segments, n_segments):
    """Sum rows of ``a`` (1-D or 2-D) into ``n_segments`` bins given by ``segments``."""
    segments = np.asarray(segments)
    av = value_of(a)
    if av.ndim == 1:
        out = np.bincount(segments, weights=av, minlength=n_segments)
    else:
        out = np.stack(
            [np.bincount(segments, weights=av[:, k], minlength=n_segments) for k in range(av.shape[1])],
            axis=1,
        )
    if not is_var(a):
        return out
    return _record("segment_sum", out, (a,), lambda g: (g[segments],))


def segment_softmax(a, segments, n_segments):
    """Softmax within each segment of a 1-D array, shifted by the segment max."""
    segments = np.asarray(segments)
    av = value_of(a)
    m = np.full(n_segments, -np.inf)
    np.maximum.at(m, segments, av)
    e = np.exp(av - m[segments])
    denom = np.bincount(segments, weights=e, minlength=n_segments)
    w = e / denom[segments]
    if not is_var(a):
        return w

    def vjp(g):
        inner = np.bincount(segments, weights=w * g, minlength=n_segments)
        return (w * (g - inner[segments]),)

    return _record("segment_softmax", w, (a,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def getitem(a, key):
    if not is_var(a):
        return np.asarray(a)[key]
    shape = a.shape
    out = a.value[key]
    advanced = any(isinstance(k, (np.ndarray, list)) for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _record("getitem", np.array(out, dtype=np.float64), (a,), vjp)


def take(a, indices):
    """Rows ``a[indices]`` along axis 0 (a gather); adjoints scatter-add back."""
    indices = np.asarray(indices, dtype=np.intp)
    av = value_of(a)
    out = av[indices]
    if not is_var(a):
        return out
    n = av.shape[0]
    rest = av.shape[1:]

    def vjp(g):
        g2 = g.reshape(len(indices), -1)
        cols = [np.bincount(indices, weights=g2[:, k], minlength=n) for k in range(g2.shape[1])]
        return (np.stack(cols, axis=1).reshape((n,) + rest),)

    return _record("take", out, (a,), vjp)


def reshape(a, shape):
    if not is_var(a):
        return np.reshape(a, shape)
    old = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    if not is_var(a):
        return np.transpose(a)
    return _record("transpose", a.value.T, (a,), lambda g: (g.T,))


def stack(items, axis=0):
    items = list(items)
    values = [value_of(x) for x in items]
    out = np.stack(values, axis=axis)
    if not any(is_var(x) for x in items):
        return out

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _record("stack", out, tuple(items), vjp)


def concatenate(items, axis=0):
    items = list(items)
    values = [value_of(x) for x in items]
    out = np.concatenate(values, axis=axis)
    if not any(is_var(x) for x in items):
        return out
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concatenate", out, tuple(items), vjp)


# ---------------------------------------------------------------------------
# composites


def det2(a, b, c, d):
    """Determinant of [[a, b], [c, d]]."""
    return a * d - b * c


def dot(a, b, axis=-1):
    return sum_(a * b, axis=axis)


def cross(a, b):
    """Cross product along the last axis (length 3)."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def norm(a, axis=-1, eps=SMOOTH_ABS_EPS):
    """Smoothed Euclidean norm sqrt(|a|^2 + eps^2)."""
    return sqrt(sum_(a * a, axis=axis) + eps * eps)


def normalize(a, axis=-1, eps=SMOOTH_ABS_EPS):
    n = norm(a, axis=axis, eps=eps)
    if is_var(n):
        return a / reshape(n, n.shape[:axis % a.ndim] + (1,) + n.shape[axis % a.ndim:])
    return a / np.expand_dims(n, axis)


_OPS = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "negate": negate,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "power": power,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log_sigmoid": log_sigmoid,
    "abs_smooth": smooth_abs,
    "absolute": absolute,
    "softmin": soft_min,
    "det2": det2,
    "dot": dot,
    "logsumexp": logsumexp,
    "logaddexp": logaddexp,
}


def elementary(tape, op_kind, *operands):
    """Apply a named elementary operation; operands must live on ``tape``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    for x in operands:
        if isinstance(x, Var) and x.tape is not tape:
            raise TapeError("operand belongs to a different tape")
    return fn(*operands)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class FDReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_abs_err: float
    max_rel_err: float


def relative_error(analytic, numeric, floor=0.0):
    """|a - n| / max(|a|, |n|, floor), with 0/0 taken as 0."""
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)


def finite_diff_check(f, inputs, step=1e-5, rel_floor=0.0):
    """Compare the reverse-mode gradient of scalar ``f`` with central differences.

    ``f`` must accept either a Var or a plain array shaped like ``inputs``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(inputs, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x)
    out = f(xv)
    if is_var(out):
        analytic = tape.backward(out)[xv]
    else:
        analytic = np.zeros_like(x)
    numeric = np.empty_like(x)
    flat, num = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(value_of(f(x)))
        flat[i] = orig - step
        lo = float(value_of(f(x)))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f is not finite at probe {i}")
        num[i] = (hi - lo) / (2.0 * step)
    err = np.abs(analytic - numeric)
    rel = relative_error(analytic, numeric, rel_floor)
    return FDReport(analytic, numeric, float(err.max(initial=0.0)), float(rel.max(initial=0.0)))
