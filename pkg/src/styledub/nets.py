"""Recurrent generator and discriminator built on the autodiff tape.

Windows are fed as a step-major matrix: for a batch of B windows of N steps
the row ``n * B + b`` holds step ``n`` of window ``b``. Dense layers then run
on all rows at once and only the LSTM recurrence is unrolled step by step.
LSTM state starts at zero for every window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Value

GATES = ("i", "f", "g", "o")


# -- layout helpers ---------------------------------------------------------

def to_step_major(windows: np.ndarray) -> np.ndarray:
    """(B, N, D) or (N, D) windows -> (N*B, D) rows."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    b, n, d = windows.shape
    return windows.transpose(1, 0, 2).reshape(n * b, d)


def from_step_major(rows: np.ndarray, steps: int) -> np.ndarray:
    """(N*B, D) rows -> (B, N, D) windows."""
    nb, d = rows.shape
    return rows.reshape(steps, nb // steps, d).transpose(1, 0, 2)


# -- initialisation ---------------------------------------------------------

def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# -- LSTM -------------------------------------------------------------------

@dataclass
class LstmCell:
    """Weights in gate-block order [input, forget, candidate, output]."""

    w_ih: np.ndarray  # (4H, I)
    w_hh: np.ndarray  # (4H, H)
    bias: np.ndarray  # (4H,)

    def __post_init__(self):
        h4, _ = self.w_ih.shape
        if h4 % 4 or self.w_hh.shape != (h4, h4 // 4) or self.bias.shape != (h4,):
            raise ShapeError(
                f"inconsistent LSTM shapes w_ih={self.w_ih.shape} w_hh={self.w_hh.shape} bias={self.bias.shape}")

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def inputs(self) -> int:
        return self.w_ih.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, inputs: int, hidden: int) -> "LstmCell":
        w_ih = glorot(rng, 4 * hidden, inputs)
        w_hh = np.concatenate([orthogonal(rng, hidden) for _ in GATES])
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        return cls(w_ih, w_hh, bias)

    @classmethod
    def zeros(cls, inputs: int, hidden: int) -> "LstmCell":
        return cls(np.zeros((4 * hidden, inputs)), np.zeros((4 * hidden, hidden)), np.zeros(4 * hidden))


def lstm_gates(pre: Value, h: Value | None, w_hh: Value, c: Value | None) -> tuple[Value, Value]:
    """One LSTM update from precomputed input projection ``pre`` (rows, 4H)."""
    hidden = w_hh.shape[1]
    z = pre if h is None else pre + ad.linear(h, w_hh)
    i = ad.sigmoid(ad.columns(z, 0, hidden))
    f = ad.sigmoid(ad.columns(z, hidden, 2 * hidden))
    g = ad.tanh(ad.columns(z, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.columns(z, 3 * hidden, 4 * hidden))
    c_new = i * g if c is None else f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def lstm_step(cell, x, state=None):
    """Single LSTM step.

    ``cell`` is an :class:`LstmCell` or a dict of bound Values with keys
    ``w_ih``, ``w_hh``, ``bias``. ``x`` is (I,) or (B, I); ``state`` is an
    ``(h, c)`` pair (zeros when omitted). Returns ``(h', c')`` as Values when
    any input is a Value, else as arrays.
    """
    raw = not isinstance(x, Value) and not isinstance(cell, dict)
    if isinstance(cell, LstmCell):
        tape = x.tape if isinstance(x, Value) else Tape()
        cell = {k: tape.constant(getattr(cell, k)) for k in ("w_ih", "w_hh", "bias")}
    tape = cell["w_ih"].tape
    hidden = cell["w_hh"].shape[1]
    x = x if isinstance(x, Value) else tape.constant(x)
    if x.shape[-1] != cell["w_ih"].shape[1]:
        raise ShapeError(f"lstm_step: input width {x.shape[-1]}, cell expects {cell['w_ih'].shape[1]}")
    batch_shape = x.shape[:-1] + (hidden,)
    if state is None:
        h = tape.constant(np.zeros(batch_shape))
        c = tape.constant(np.zeros(batch_shape))
    else:
        h, c = (s if isinstance(s, Value) else tape.constant(s) for s in state)
        if h.shape != batch_shape or c.shape != batch_shape:
            raise ShapeError(f"lstm_step: state shapes {h.shape}, {c.shape}; expected {batch_shape}")
    single = x.data.ndim == 1
    if single:  # gate slicing works on rows
        x, h, c = (ad.getitem(v, (None, slice(None))) for v in (x, h, c))
    pre = ad.linear(x, cell["w_ih"], cell["bias"])
    h_new, c_new = lstm_gates(pre, h, cell["w_hh"], c)
    if single:
        h_new, c_new = ad.getitem(h_new, 0), ad.getitem(c_new, 0)
    if raw:
        return h_new.data, c_new.data
    return h_new, c_new


def lstm_sequence_composed(x: Value, steps: int, w_ih: Value, w_hh: Value, bias: Value) -> Value:
    """LSTM over step-major rows built from primitive tape ops.

    Reference for :func:`lstm_sequence`, which computes the same function
    with a hand-written backward pass.
    """
    rows = x.shape[0]
    if rows % steps:
        raise ShapeError(f"{rows} rows cannot be split into {steps} steps")
    batch = rows // steps
    pre = ad.linear(x, w_ih, bias)
    h = c = None
    outs = []
    for n in range(steps):
        h, c = lstm_gates(ad.rows(pre, n * batch, (n + 1) * batch), h, w_hh, c)
        outs.append(h)
    return ad.concat(outs, axis=0)


def _sig(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_sequence(x: Value, steps: int, w_ih: Value, w_hh: Value, bias: Value) -> Value:
    """LSTM over step-major rows as one tape op; returns hidden states (N*B, H)."""
    rows, n_in = x.shape
    hidden = w_hh.shape[1]
    if rows % steps:
        raise ShapeError(f"{rows} rows cannot be split into {steps} steps")
    if w_ih.shape != (4 * hidden, n_in) or w_hh.shape != (4 * hidden, hidden) or bias.shape != (4 * hidden,):
        raise ShapeError(f"lstm: shapes x={x.shape} w_ih={w_ih.shape} w_hh={w_hh.shape} bias={bias.shape}")
    batch = rows // steps
    xd, wi, wh = x.data, w_ih.data, w_hh.data
    z = xd @ wi.T
    z += bias.data
    gates = np.empty_like(z)
    cell = np.empty((rows, hidden))
    tanh_c = np.empty((rows, hidden))
    out = np.empty((rows, hidden))
    H = hidden
    for n in range(steps):
        r = slice(n * batch, (n + 1) * batch)
        zn = z[r]
        if n:
            zn += out[n * batch - batch:n * batch] @ wh.T
        gn = gates[r]
        gn[:, :2 * H] = _sig(zn[:, :2 * H])
        gn[:, 2 * H:3 * H] = np.tanh(zn[:, 2 * H:3 * H])
        gn[:, 3 * H:] = _sig(zn[:, 3 * H:])
        i, f, g, o = gn[:, :H], gn[:, H:2 * H], gn[:, 2 * H:3 * H], gn[:, 3 * H:]
        cell[r] = i * g if n == 0 else f * cell[n * batch - batch:n * batch] + i * g
        tanh_c[r] = np.tanh(cell[r])
        out[r] = o * tanh_c[r]

    def grad(d_out):
        dz = np.empty_like(gates)
        dh_next = None
        dc_next = None
        for n in range(steps - 1, -1, -1):
            r = slice(n * batch, (n + 1) * batch)
            gn = gates[r]
            i, f, g, o = gn[:, :H], gn[:, H:2 * H], gn[:, 2 * H:3 * H], gn[:, 3 * H:]
            dh = d_out[r] if dh_next is None else d_out[r] + dh_next
            tc = tanh_c[r]
            dc = dh * o * (1.0 - tc * tc)
            if dc_next is not None:
                dc += dc_next
            dzn = dz[r]
            dzn[:, :H] = dc * g * i * (1.0 - i)
            if n:
                dzn[:, H:2 * H] = dc * cell[n * batch - batch:n * batch] * f * (1.0 - f)
            else:
                dzn[:, H:2 * H] = 0.0
            dzn[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dzn[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            if n:
                dh_next = dzn @ wh
        gx = dz @ wi if x.requires_grad else None
        gwi = dz.T @ xd if w_ih.requires_grad else None
        gwh = dz[batch:].T @ out[:-batch] if w_hh.requires_grad else None
        gb = dz.sum(axis=0) if bias.requires_grad else None
        return gx, gwi, gwh, gb

    return ad.record(x.tape, out, "lstm", (x, w_ih, w_hh, bias), grad)


# -- networks ---------------------------------------------------------------

@dataclass
class Network:
    """Named float64 parameter arrays plus the architecture they belong to."""

    kind: str
    params: dict[str, np.ndarray]
    dims: dict[str, int] = field(default_factory=dict)

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Value]:
        return {k: tape.leaf(v, trainable=trainable, name=k) for k, v in self.params.items()}

    def copy(self) -> "Network":
        return Network(self.kind, {k: v.copy() for k, v in self.params.items()}, dict(self.dims))

    def num_params(self) -> int:
        return int(np.sum([v.size for v in self.params.values()]))

    def graph(self, bound: dict[str, Value], x: Value, steps: int) -> Value:
        if self.kind == "generator":
            return generator_graph(bound, x, steps)
        if self.kind == "discriminator":
            return discriminator_graph(bound, x, steps)
        raise ValueError(f"unknown network kind {self.kind!r}")

    def __call__(self, windows: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Evaluate on (N, D) or (B, N, D) windows without recording gradients."""
        windows = np.asarray(windows, dtype=np.float64)
        single = windows.ndim == 2
        if single:
            windows = windows[None]
        if windows.ndim != 3 or windows.shape[2] != self.dims["dim"]:
            raise ShapeError(f"{self.kind}: expected windows of width {self.dims['dim']}, got shape {windows.shape}")
        steps = windows.shape[1]
        outs = []
        for start in range(0, windows.shape[0], chunk):
            block = windows[start:start + chunk]
            tape = Tape()
            bound = self.bind(tape, trainable=False)
            y = self.graph(bound, tape.constant(to_step_major(block)), steps)
            outs.append(from_step_major(y.data, steps))
        out = np.concatenate(outs) if outs else np.zeros((0, steps, 0))
        if self.kind == "discriminator":
            out = out[..., 0]
        return out[0] if single else out


def init_generator(rng: np.random.Generator, dim: int = 64, width: int = 1024,
                   init: str = "identity", branch_scale: float = 0.1) -> Network:
    """Generator weights.

    ``init="glorot"`` draws every matrix from a Glorot-uniform distribution.
    ``init="identity"`` (needs width >= 2*dim) makes the first layer carry
    ``relu(x)`` and ``relu(-x)`` in its first 2*dim units and reads them back
    out as ``x``; the remaining first-layer units are Glorot, the residual
    branches are Glorot scaled by ``branch_scale`` and the output ignores the
    extra units, so the untrained generator is a small perturbation of the
    identity map.
    """
    if init not in ("identity", "glorot"):
        raise ValueError(f"unknown generator init {init!r}")
    if init == "identity" and width < 2 * dim:
        raise ValueError(f"identity init needs width >= {2 * dim}, got {width}")
    cell = LstmCell.init(rng, width, width)
    p = {
        "l1.w": glorot(rng, width, dim), "l1.b": np.zeros(width),
        "l2.w": glorot(rng, width, width), "l2.b": np.zeros(width),
        "l3.w_ih": cell.w_ih, "l3.w_hh": cell.w_hh, "l3.bias": cell.bias,
        "l4.w": glorot(rng, width, width), "l4.b": np.zeros(width),
        "out.w": glorot(rng, dim, width), "out.b": np.zeros(dim),
    }
    if init == "identity":
        eye = np.eye(dim)
        p["l1.w"][:dim] = eye
        p["l1.w"][dim:2 * dim] = -eye
        for k in ("l2.w", "l3.w_ih", "l4.w"):
            p[k] *= branch_scale
        p["out.w"][:] = 0.0
        p["out.w"][:, :dim] = eye
        p["out.w"][:, dim:2 * dim] = -eye
    return Network("generator", p, {"dim": dim, "width": width})


def zero_generator(dim: int = 64, width: int = 1024) -> Network:
    net = init_generator(np.random.default_rng(0), dim, width, init="glorot")
    for v in net.params.values():
        v[...] = 0.0
    return net


def identity_generator(dim: int = 64, width: int | None = None) -> Network:
    """Generator computing the identity: relu(x) - relu(-x) through zeroed middle layers."""
    width = 2 * dim if width is None else width
    if width < 2 * dim:
        raise ValueError(f"identity generator needs width >= {2 * dim}")
    net = zero_generator(dim, width)
    eye = np.eye(dim)
    net.params["l1.w"][:dim] = eye
    net.params["l1.w"][dim:2 * dim] = -eye
    net.params["out.w"][:, :dim] = eye
    net.params["out.w"][:, dim:2 * dim] = -eye
    return net


def generator_graph(w: dict[str, Value], x: Value, steps: int) -> Value:
    h1 = ad.relu(ad.linear(x, w["l1.w"], w["l1.b"]))
    h2 = h1 + ad.relu(ad.linear(h1, w["l2.w"], w["l2.b"]))
    h3 = h2 + lstm_sequence(h2, steps, w["l3.w_ih"], w["l3.w_hh"], w["l3.bias"])
    h4 = h3 + ad.relu(ad.linear(h3, w["l4.w"], w["l4.b"]))
    return ad.linear(h4, w["out.w"], w["out.b"])


def init_discriminator(rng: np.random.Generator, dim: int = 64, width: int | None = None) -> Network:
    """Layers of width w, w/2, w/4 (LSTM), w/8, w/16, then a sigmoid output."""
    width = dim if width is None else width
    if width < 16 or width % 16:
        raise ValueError(f"discriminator width must be a positive multiple of 16, got {width}")
    w1, w2, w3, w4, w5 = (width >> k for k in range(5))
    cell = LstmCell.init(rng, w2, w3)
    p = {
        "l1.w": glorot(rng, w1, dim), "l1.b": np.zeros(w1),
        "l2.w": glorot(rng, w2, w1), "l2.b": np.zeros(w2),
        "l3.w_ih": cell.w_ih, "l3.w_hh": cell.w_hh, "l3.bias": cell.bias,
        "l4.w": glorot(rng, w4, w3), "l4.b": np.zeros(w4),
        "l5.w": glorot(rng, w5, w4), "l5.b": np.zeros(w5),
        "out.w": glorot(rng, 1, w5), "out.b": np.zeros(1),
    }
    return Network("discriminator", p, {"dim": dim, "width": width})


def discriminator_graph(w: dict[str, Value], x: Value, steps: int) -> Value:
    """Per-step scores in (0, 1), shape (N*B, 1)."""
    h1 = ad.relu(ad.linear(x, w["l1.w"], w["l1.b"]))
    h2 = ad.relu(ad.linear(h1, w["l2.w"], w["l2.b"]))
    h3 = lstm_sequence(h2, steps, w["l3.w_ih"], w["l3.w_hh"], w["l3.bias"])
    h4 = ad.relu(ad.linear(h3, w["l4.w"], w["l4.b"]))
    h5 = ad.relu(ad.linear(h4, w["l5.w"], w["l5.b"]))
    return ad.sigmoid(ad.linear(h5, w["out.w"], w["out.b"]))


def generator_forward(w: Network, win: np.ndarray) -> np.ndarray:
    """Translate one (N, D) window or a (B, N, D) batch; one output per step."""
    if w.kind != "generator":
        raise ValueError("expected generator weights")
    return w(win)


def discriminator_forward(w: Network, win: np.ndarray) -> np.ndarray:
    """Per-step realness scores: (N,) for one window, (B, N) for a batch."""
    if w.kind != "discriminator":
        raise ValueError("expected discriminator weights")
    return w(win)
