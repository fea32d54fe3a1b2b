"""Cycle-consistency, adversarial and cosine mouth-expression losses.

All losses accept windows either as numpy arrays of shape (N, D) or
(B, N, D), or as step-major Values (see :mod:`styledub.nets`) together with
``steps``. Generators and discriminators are callables mapping a step-major
Value to a step-major Value. Batched losses are averaged over windows.

With array inputs the result is a float; with Value inputs it is a scalar
Value on the same tape.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .nets import to_step_major
from .params import MouthIndexSet

SCORE_EPS = 1e-7
COS_EPS = 1e-8

Fn = Callable[[Value], Value]


class LossError(ValueError):
    pass


class DegenerateMouthWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_cc: float = 10.0
    lambda_adv: float = 1.0
    lambda_me: float = 5.0

    def __post_init__(self):
        for name in ("lambda_cc", "lambda_adv", "lambda_me"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise LossError(f"{name} must be a finite nonnegative number, got {v}")


def _prepare(windows, steps, tape):
    """Return (Value, steps, batch) for either an array or a step-major Value."""
    if isinstance(windows, Value):
        if steps is None:
            raise LossError("steps is required when windows are given as Values")
        return windows, steps, windows.shape[0] // steps
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise LossError(f"windows must be (N, D) or (B, N, D), got shape {arr.shape}")
    return tape.constant(to_step_major(arr)), arr.shape[1], arr.shape[0]


def _tape_for(*xs) -> tuple[Tape, bool]:
    for x in xs:
        if isinstance(x, Value):
            return x.tape, True
    return Tape(), False


def _result(v: Value, as_value: bool):
    return v if as_value else float(v.data)


def _check_same(a: Value, b: Value, what: str):
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def cycle_loss(s, t, g_st: Fn, g_ts: Fn, steps: int | None = None, fake_t=None, fake_s=None):
    """l1 distance of both round trips to their starting windows."""
    tape, as_value = _tape_for(s, t)
    s, n, bs = _prepare(s, steps, tape)
    t, _, bt = _prepare(t, n, tape)
    back_s = g_ts(g_st(s) if fake_t is None else fake_t)
    back_t = g_st(g_ts(t) if fake_s is None else fake_s)
    _check_same(back_s, s, "cycle_loss (source)")
    _check_same(back_t, t, "cycle_loss (target)")
    loss = ad.scale(ad.l1_norm(back_s - s), 1.0 / bs) + ad.scale(ad.l1_norm(back_t - t), 1.0 / bt)
    return _result(loss, as_value)


def _window_mean(scores: Value, steps: int) -> Value:
    """Per-window mean over steps of step-major (N*B, 1) scores -> (B, 1)."""
    batch = scores.shape[0] // steps
    avg = np.zeros((batch, steps * batch))
    for n in range(steps):
        avg[np.arange(batch), n * batch + np.arange(batch)] = 1.0 / steps
    return ad.matmul(scores.tape.constant(avg), scores)


def mean_score(scores: Value, steps: int) -> Value:
    """Clamp per-step scores into [eps, 1-eps] and average them per window."""
    if not np.all(np.isfinite(scores.data)):
        raise LossError("non-finite discriminator score")
    return _window_mean(ad.clip(scores, SCORE_EPS, 1.0 - SCORE_EPS), steps)


def _log_real(scores: Value, steps: int) -> Value:
    return ad.mean(ad.log(mean_score(scores, steps)))


def _log_fake(scores: Value, steps: int) -> Value:
    return ad.mean(ad.log(1.0 - mean_score(scores, steps)))


def _neg_log_fake_ns(scores: Value, steps: int) -> Value:
    return -ad.mean(ad.log(mean_score(scores, steps)))


def adversarial_terms(s, t, g_st: Fn, g_ts: Fn, d_s: Fn, d_t: Fn, steps: int | None = None,
                      fake_t=None, fake_s=None) -> dict[str, Value]:
    """The four log terms of the bidirectional objective, batch-averaged.

    ``fake_t``/``fake_s`` let callers pass precomputed generator outputs.
    """
    tape, _ = _tape_for(s, t, fake_t, fake_s)
    s, n, _ = _prepare(s, steps, tape)
    t, _, _ = _prepare(t, n, tape)
    fake_t = g_st(s) if fake_t is None else fake_t
    fake_s = g_ts(t) if fake_s is None else fake_s
    return {
        "real_t": _log_real(d_t(t), n),
        "fake_t": _log_fake(d_t(fake_t), n),
        "real_s": _log_real(d_s(s), n),
        "fake_s": _log_fake(d_s(fake_s), n),
    }


def adversarial_loss(s, t, g_st: Fn, g_ts: Fn, d_s: Fn, d_t: Fn, steps: int | None = None):
    """log mean D_T(t) + log(1 - mean D_T(G_ST(s))) + the same for the source domain."""
    _, as_value = _tape_for(s, t)
    terms = adversarial_terms(s, t, g_st, g_ts, d_s, d_t, steps)
    total = terms["real_t"] + terms["fake_t"] + terms["real_s"] + terms["fake_s"]
    return _result(total, as_value)


def generator_adversarial(fake_t: Value, fake_s: Value, d_s: Fn, d_t: Fn, steps: int,
                          non_saturating: bool = False) -> Value:
    """Generator share of the adversarial objective (to be minimised)."""
    if non_saturating:
        return _neg_log_fake_ns(d_t(fake_t), steps) + _neg_log_fake_ns(d_s(fake_s), steps)
    return _log_fake(d_t(fake_t), steps) + _log_fake(d_s(fake_s), steps)


def _mouth(x: Value, m: MouthIndexSet) -> Value:
    if x.shape[1] != m.dim:
        raise LossError(f"expected expression width {m.dim}, got {x.shape[1]}")
    return ad.getitem(x, (slice(None), m.array))


def cosine_rows(a: Value, b: Value, eps: float = COS_EPS) -> tuple[Value, bool]:
    """Row-wise cosine similarity; rows where either norm < eps yield 0.

    Returns the (rows,) similarities and whether any row was degenerate.
    """
    _check_same(a, b, "cosine")
    na = ad.l2_norm(a, axis=1)
    nb = ad.l2_norm(b, axis=1)
    valid = ((na.data >= eps) & (nb.data >= eps)).astype(np.float64)
    pad = 1.0 - valid
    num = ad.sum(a * b, axis=1)
    den = (na * valid + pad) * (nb * valid + pad)
    return (num / den) * valid, bool(pad.any())


def cosine_mouth_similarity(a, b, m: MouthIndexSet | None = None, steps: int | None = None):
    """Mean over steps (and windows) of the cosine between mouth sub-vectors."""
    m = MouthIndexSet() if m is None else m
    tape, as_value = _tape_for(a, b)
    a, n, _ = _prepare(a, steps, tape)
    b, _, _ = _prepare(b, n, tape)
    sims, degenerate = cosine_rows(_mouth(a, m), _mouth(b, m))
    if degenerate:
        warnings.warn("zero-norm mouth sub-vector; step contributes 0", DegenerateMouthWarning, stacklevel=2)
    return _result(ad.mean(sims), as_value)


def mouth_expression_loss(s, t, g_st: Fn, g_ts: Fn, m: MouthIndexSet | None = None,
                          steps: int | None = None, fake_t=None, fake_s=None):
    """[1 - cos(s, G_ST(s))] + [1 - cos(t, G_TS(t))]; lies in [0, 4]."""
    tape, as_value = _tape_for(s, t, fake_t, fake_s)
    s, n, _ = _prepare(s, steps, tape)
    t, _, _ = _prepare(t, n, tape)
    fake_t = g_st(s) if fake_t is None else fake_t
    fake_s = g_ts(t) if fake_s is None else fake_s
    loss = (1.0 - cosine_mouth_similarity(s, fake_t, m, n)) + (1.0 - cosine_mouth_similarity(t, fake_s, m, n))
    return _result(loss, as_value)


def total_loss(components, w: LossWeights | None = None):
    """lambda_cc * L_cc + lambda_adv * L_adv + lambda_me * L_me."""
    w = LossWeights() if w is None else w
    l_cc, l_adv, l_me = components
    for name, c in zip(("L_cc", "L_adv", "L_me"), components):
        val = c.data if isinstance(c, Value) else c
        if not np.all(np.isfinite(val)):
            raise LossError(f"non-finite loss component {name}")
    if any(isinstance(c, Value) for c in components):
        tape = next(c.tape for c in components if isinstance(c, Value))
        l_cc, l_adv, l_me = (c if isinstance(c, Value) else tape.constant(c) for c in components)
        return ad.scale(l_cc, w.lambda_cc) + ad.scale(l_adv, w.lambda_adv) + ad.scale(l_me, w.lambda_me)
    return w.lambda_cc * l_cc + w.lambda_adv * l_adv + w.lambda_me * l_me
