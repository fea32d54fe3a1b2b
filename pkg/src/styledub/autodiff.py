"""Define-by-run reverse-mode differentiation over rank <= 2 float64 arrays.

Every op appends a node to the tape of its inputs; ``backward`` walks the
tape in reverse and sums contributions from every path.

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = ad.sum(x * x)
    grads = backward(tape, y)    # {x.id: array([6.])}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tape:
    """Append-only record of operations. Node ids are positions on the tape."""

    def __init__(self, validate: bool = False):
        self.nodes: list[Value] = []
        self.validate = validate

    def _record(self, value: "Value") -> "Value":
        if self.validate and not np.all(np.isfinite(value.data)):
            raise NonFiniteError(f"non-finite result from op {value.op!r}")
        value.id = len(self.nodes)
        self.nodes.append(value)
        return value

    def leaf(self, data, trainable: bool = True, name: str | None = None) -> "Value":
        """Register an input. float64 arrays are wrapped without copying and must
        not be modified until the tape is discarded."""
        v = Value(_as_array(data), self, op="leaf", requires_grad=trainable)
        v.trainable = trainable
        v.name = name
        return self._record(v)

    def constant(self, data, name: str | None = None) -> "Value":
        return self.leaf(data, trainable=False, name=name)

    def __len__(self):
        return len(self.nodes)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} arrays are not supported (max rank 2)")
    return arr


class Value:
    __slots__ = ("data", "tape", "op", "parents", "grad_fn", "requires_grad", "trainable", "name", "id")

    def __init__(self, data, tape, op, parents=(), grad_fn=None, requires_grad=False):
        self.data = data
        self.tape = tape
        self.op = op
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad
        self.trainable = False
        self.name = None
        self.id = -1

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(id={self.id}, op={self.op}, shape={self.shape})"

    def item(self) -> float:
        return float(self.data)

    # operators
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Value):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands belong to different tapes")
    if tape is None:
        raise TypeError("at least one operand must be a Value")
    return tape


def _lift(x, tape: Tape) -> Value:
    return x if isinstance(x, Value) else tape.constant(x)


def record(tape: Tape, data: np.ndarray, op: str, parents: Sequence[Value], grad_fn) -> Value:
    """Record a custom op. ``grad_fn(g)`` returns one gradient (or None) per parent."""
    return _make(tape, data, op, parents, grad_fn)


def _make(tape, data, op, parents, grad_fn) -> Value:
    req = any(p.requires_grad for p in parents)
    v = Value(data, tape, op, parents, grad_fn if req else None, req)
    return tape._record(v)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if len(shape) > 2:
        raise ShapeError(f"{op}: result rank {len(shape)} exceeds 2")
    return shape


# -- binary elementwise -----------------------------------------------------

def add(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(tape, a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(tape, a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(tape, ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(tape, out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return _make(a.tape, a.data * c, "scale", (a,), lambda g: (g * c,))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Value:
    """Matrix-matrix or matrix-vector product (numpy ``@`` semantics, rank <= 2)."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if ad.ndim == 2 else g * bd
            else:
                ga = g @ bd.T
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g) if bd.ndim == 2 else g * ad
            elif bd.ndim == 1:
                gb = ad.T @ g
            else:
                gb = ad.T @ g
        return ga, gb

    return _make(tape, ad @ bd, "matmul", (a, b), grad)


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    """Dense layer x @ w.T + b with weights stored (out, in); x is (rows, in) or (in,)."""
    tape = _tape_of(x, w)
    x, w = _lift(x, tape), _lift(w, tape)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = _lift(b, tape)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape}, expected ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def grad(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.multiply.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        gb = None
        if b is not None and b.requires_grad:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return _make(tape, out, "linear", parents, grad)


def transpose(a: Value) -> Value:
    return _make(a.tape, a.data.T, "transpose", (a,), lambda g: (g.T,))


def dot(a: Value, b: Value) -> Value:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected two equal-length vectors, got {a.shape} and {b.shape}")
    return matmul(a, b)


# -- unary elementwise ------------------------------------------------------

def relu(a: Value) -> Value:
    mask = a.data > 0
    return _make(a.tape, np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Value) -> Value:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(a.tape, out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return _make(a.tape, out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def log(a: Value) -> Value:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(a.tape, out, "log", (a,), lambda g: (g / x,))


def absolute(a: Value) -> Value:
    s = np.sign(a.data)
    return _make(a.tape, np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def clip(a: Value, lo: float, hi: float) -> Value:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(a.tape, np.clip(x, lo, hi), "clip", (a,), lambda g: (g * inside,))


# -- reductions -------------------------------------------------------------

def sum(a: Value, axis: int | None = None) -> Value:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return _make(a.tape, np.asarray(a.data.sum()), "sum", (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _make(a.tape, out, "sum", (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Value, axis: int | None = None) -> Value:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l1_norm(a: Value) -> Value:
    return sum(absolute(a))


def l2_norm(a: Value, axis: int | None = None) -> Value:
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    x = a.data
    if axis is None:
        out = np.asarray(np.sqrt(np.sum(x * x)))
        return _make(a.tape, out, "l2_norm", (a,), lambda g: (_safe_div(g * x, out),))
    out = np.sqrt(np.sum(x * x, axis=axis))
    return _make(a.tape, out, "l2_norm", (a,),
                 lambda g: (_safe_div(np.expand_dims(g, axis) * x, np.expand_dims(out, axis)),))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    den = np.broadcast_to(den, num.shape)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


# -- structural -------------------------------------------------------------

def concat(values: Sequence[Value], axis: int = 0) -> Value:
    tape = _tape_of(*values)
    values = [_lift(v, tape) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _make(tape, out, "concat", values, lambda g: tuple(np.split(g, sizes, axis=axis)))


def getitem(a: Value, index) -> Value:
    """Basic slicing or integer-array gathering."""
    out = a.data[index]
    if out.ndim > 2:
        raise ShapeError("getitem: result rank exceeds 2")
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.tape, np.array(out), "getitem", (a,), grad)


def rows(a: Value, start: int, stop: int) -> Value:
    """Contiguous row slice; cheaper backward than general gathering."""
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.tape, a.data[start:stop], "rows", (a,), grad)


def columns(a: Value, start: int, stop: int) -> Value:
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.tape, a.data[:, start:stop], "columns", (a,), grad)


OPS: dict[str, Callable[..., Value]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "abs": absolute,
    "sum": sum,
    "mean": mean,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "dot": dot,
    "concat": lambda *vs, axis=0: concat(vs, axis=axis),
    "getitem": getitem,
    "transpose": transpose,
    "linear": linear,
    "clip": clip,
}


def apply_op(kind: str, *inputs, **kwargs) -> Value:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward ---------------------------------------------------------------

def backward(tape: Tape, root: Value) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. every trainable leaf, keyed by node id.

    Trainable leaves the root does not depend on get zero gradients.
    """
    if root.tape is not tape:
        raise ValueError("root is not recorded on this tape")
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    nodes = tape.nodes
    for i in range(root.id, -1, -1):
        g = grads.get(i)
        node = nodes[i]
        if g is None or node.grad_fn is None:
            continue
        if not node.trainable:
            del grads[i]
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    return {
        n.id: grads[n.id] if n.id in grads else np.zeros_like(n.data)
        for n in nodes[: root.id + 1]
        if n.trainable
    }


# -- verification -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_leaf: list[float] = field(default_factory=list)
    checked: int = 0
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(
    f: Callable[..., Value],
    leaves: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-5,
    grads: Sequence[np.ndarray] | None = None,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` receives one Value per entry of ``leaves`` and must return a scalar
    Value. Error per component is |ad - fd| / max(1, |ad|, |fd|). ``grads``
    overrides the reverse-mode gradients (used for negative controls);
    ``sample`` limits the check to that many random components per leaf.

    With ``kink_tol`` set, a component whose forward and backward one-sided
    slopes differ by more than ``kink_tol`` (relative) straddles a point
    where ``f`` is not differentiable, such as a relu or abs switching sign
    within ``h``. It is counted in ``kinks`` and, when sampling, replaced by
    another component of the same leaf.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    leaves = [np.array(x, dtype=np.float64) for x in leaves]

    def evaluate(arrays):
        tape = Tape()
        out = f(*[tape.leaf(a) for a in arrays])
        val = float(np.asarray(out.data).reshape(()))
        if not np.isfinite(val):
            raise NonFiniteError("function value is not finite")
        return tape, out, val

    f0 = None
    if grads is None:
        tape, out, f0 = evaluate(leaves)
        g = backward(tape, out)
        grads = [g[i] for i in range(len(leaves))]
    if kink_tol is not None and f0 is None:
        f0 = evaluate(leaves)[2]
    rng = rng if rng is not None else np.random.default_rng(0)

    per_leaf = []
    checked = kinks = 0
    for k, x in enumerate(leaves):
        ad = np.asarray(grads[k], dtype=np.float64).reshape(-1)
        flat = x.reshape(-1)
        want = flat.size
        comps = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            want = sample
            comps = rng.permutation(flat.size) if kink_tol is not None else rng.choice(
                flat.size, size=sample, replace=False)
        worst = 0.0
        done = 0
        for j in comps:
            if done == want:
                break
            orig = flat[j]
            flat[j] = orig + h
            fp = evaluate(leaves)[2]
            flat[j] = orig - h
            fm = evaluate(leaves)[2]
            flat[j] = orig
            if kink_tol is not None:
                right, left = (fp - f0) / h, (f0 - fm) / h
                if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                    kinks += 1
                    continue
            fd = (fp - fm) / (2 * h)
            err = abs(ad[j] - fd) / max(1.0, abs(ad[j]), abs(fd))
            worst = max(worst, err)
            checked += 1
            done += 1
        per_leaf.append(worst)
    return GradCheckReport(max(per_leaf, default=0.0), tol, per_leaf, checked, kinks)
