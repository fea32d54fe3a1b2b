"""Unpaired training of the two generators and two discriminators.

Each iteration draws independent source and target window batches, takes one
ascent step for both discriminators on the adversarial objective, then one
descent step for both generators on the weighted cycle, adversarial and
mouth-expression losses. Gradients are clipped by global norm before Adam.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numba
import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tape
from .nets import Network, init_discriminator, init_generator, to_step_major
from .params import (
    STD_EPS,
    ExpressionSequence,
    MouthIndexSet,
    NormStats,
    normalize_sequence,
    padded_windows,
    sliding_windows,
)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DSTW"
CKPT_VERSION = 1
CKPT_END = b"DEND"

NETWORKS = ("g_st", "g_ts", "d_s", "d_t")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    window: int = 7
    batch_size: int = 16
    epochs: int = 25
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    train_frames: int = 7500
    gen_width: int = 1024
    disc_width: int = 64
    gen_init: str = "identity"
    mouth_indices: tuple[int, ...] = tuple(range(10))
    non_saturating: bool = False
    # learning-rate halving every K epochs; 0 disables
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = L.LossWeights(**self.loss_weights)
        self.mouth_indices = tuple(int(i) for i in self.mouth_indices)
        for name in ("window", "batch_size", "epochs", "train_frames", "gen_width", "disc_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate", "adam_eps", "clip_norm", "lr_decay_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def mouth(self) -> MouthIndexSet:
        return MouthIndexSet(self.mouth_indices)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mouth_indices"] = list(self.mouth_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- optimisation -----------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@numba.njit(cache=True)
def _adam_kernel(w, g, m, v, lr, beta1, beta2, eps, c1, c2):
    for j in range(w.size):
        gj = g[j]
        mj = beta1 * m[j] + (1.0 - beta1) * gj
        vj = beta2 * v[j] + (1.0 - beta2) * (gj * gj)
        m[j] = mj
        v[j] = vj
        w[j] = w[j] - lr * (mj / c1) / (math.sqrt(vj / c2) + eps)


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, applied to ``weights`` and ``state`` in place.

    Weight arrays must be C-contiguous float64 (they are updated through a
    flat view).
    """
    for k, g in grads.items():
        if k not in weights or weights[k].shape != np.shape(g):
            have = weights[k].shape if k in weights else None
            raise ValueError(f"gradient {k!r} has shape {np.shape(g)}, weight has {have}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        w = weights[k]
        if not w.flags.c_contiguous:
            raise ValueError(f"weight {k!r} is not contiguous")
        if k not in state.m:
            state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        g = np.ascontiguousarray(g, dtype=np.float64)
        _adam_kernel(w.reshape(-1), g.reshape(-1), state.m[k].reshape(-1), state.v[k].reshape(-1),
                     float(lr), float(beta1), float(beta2), float(eps), c1, c2)
    return weights, state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float, inplace: bool = False) -> dict[str, np.ndarray]:
    """Rescale all gradients by max_norm / norm when the global l2 norm exceeds max_norm."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads if inplace else {k: g.copy() for k, g in grads.items()}
    factor = max_norm / norm
    if inplace:
        for g in grads.values():
            g *= factor
        return grads
    return {k: g * factor for k, g in grads.items()}


# -- checkpoint -------------------------------------------------------------

@dataclass
class Checkpoint:
    nets: dict[str, Network]
    config: TrainConfig
    stats: dict[str, NormStats]
    opt: dict[str, OptimizerState] = field(default_factory=dict)
    epoch: int = 0

    def generator(self, direction: str) -> Network:
        if direction not in ("st", "ts"):
            raise ValueError(f"direction must be 'st' or 'ts', got {direction!r}")
        return self.nets["g_" + direction]


def _write_block(out: list, tag: str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    name = tag.encode("utf-8")
    out.append(struct.pack("<H", len(name)))
    out.append(name)
    out.append(struct.pack("<B", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "networks": {k: {"kind": n.kind, "dims": n.dims} for k, n in ckpt.nets.items()},
        "optimizer": {k: {"step": s.step} for k, s in ckpt.opt.items()},
        "stats": sorted(ckpt.stats),
    }
    blocks: list[tuple[str, np.ndarray]] = []
    for name in sorted(ckpt.stats):
        blocks.append((f"stats/{name}/mean", ckpt.stats[name].mean))
        blocks.append((f"stats/{name}/std", ckpt.stats[name].std))
    for net_name in sorted(ckpt.nets):
        for k, v in ckpt.nets[net_name].params.items():
            blocks.append((f"net/{net_name}/{k}", v))
    for opt_name in sorted(ckpt.opt):
        st = ckpt.opt[opt_name]
        for k in st.m:
            blocks.append((f"opt/{opt_name}/m/{k}", st.m[k]))
            blocks.append((f"opt/{opt_name}/v/{k}", st.v[k]))
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(head)), head, struct.pack("<I", len(blocks))]
    for tag, arr in blocks:
        _write_block(out, tag, arr)
    out.append(CKPT_END)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}, file has {len(self.blob)}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a DSTW checkpoint")
    version, head_len = r.unpack("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    try:
        header = json.loads(r.take(head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        tag = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arrays[tag] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.take(4) != CKPT_END:
        raise CheckpointError("missing end marker")
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after end marker")

    try:
        config = TrainConfig.from_dict(header["config"])
        stats = {s: NormStats(arrays[f"stats/{s}/mean"], arrays[f"stats/{s}/std"]) for s in header["stats"]}
        nets = {}
        for name, meta in header["networks"].items():
            prefix = f"net/{name}/"
            params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            nets[name] = Network(meta["kind"], params, {k: int(v) for k, v in meta["dims"].items()})
        opt = {}
        for name, meta in header["optimizer"].items():
            st = OptimizerState(step=int(meta["step"]))
            for prefix, target in ((f"opt/{name}/m/", st.m), (f"opt/{name}/v/", st.v)):
                for k, v in arrays.items():
                    if k.startswith(prefix):
                        target[k[len(prefix):]] = v
            opt[name] = st
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing entry {exc}") from None
    return Checkpoint(nets, config, stats, opt, int(header["epoch"]))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# -- training ---------------------------------------------------------------

def _prefixed(nets: dict[str, Network], names) -> dict[str, np.ndarray]:
    return {f"{n}/{k}": v for n in names for k, v in nets[n].params.items()}


def prepare_corpus(seq: ExpressionSequence, config: TrainConfig) -> tuple[np.ndarray, NormStats]:
    """Training split -> normalized sliding windows and the split's stats."""
    split = seq.slice(0, config.train_frames)
    if len(split) < 2:
        raise TrainingError(f"need at least 2 training frames, got {len(split)}")
    normed, stats = normalize_sequence(split)
    return sliding_windows(normed, config.window), stats


def init_checkpoint(config: TrainConfig, dim: int, stats: dict[str, NormStats]) -> Checkpoint:
    seeds = np.random.SeedSequence(config.seed).spawn(len(NETWORKS))
    nets = {}
    for name, ss in zip(NETWORKS, seeds):
        rng = np.random.default_rng(ss)
        if name.startswith("g"):
            nets[name] = init_generator(rng, dim, config.gen_width, init=config.gen_init)
        else:
            nets[name] = init_discriminator(rng, dim, config.disc_width)
    return Checkpoint(nets, config, stats, {"gen": OptimizerState(), "disc": OptimizerState()}, 0)


def train_step(ckpt: Checkpoint, s_batch: np.ndarray, t_batch: np.ndarray, lr: float) -> dict[str, float]:
    """One discriminator update followed by one generator update."""
    cfg = ckpt.config
    w = cfg.loss_weights
    steps = s_batch.shape[1]
    nets = ckpt.nets
    mouth = cfg.mouth

    gtape = Tape()
    g_st = nets["g_st"].bind(gtape)
    g_ts = nets["g_ts"].bind(gtape)
    s = gtape.constant(to_step_major(s_batch))
    t = gtape.constant(to_step_major(t_batch))
    fake_t = nets["g_st"].graph(g_st, s, steps)
    fake_s = nets["g_ts"].graph(g_ts, t, steps)

    # discriminators: ascend on the adversarial objective
    dtape = Tape()
    d_s = nets["d_s"].bind(dtape)
    d_t = nets["d_t"].bind(dtape)
    terms = L.adversarial_terms(
        dtape.constant(s.data), dtape.constant(t.data), None, None,
        lambda x: nets["d_s"].graph(d_s, x, steps), lambda x: nets["d_t"].graph(d_t, x, steps),
        steps=steps, fake_t=dtape.constant(fake_t.data), fake_s=dtape.constant(fake_s.data))
    l_adv_d = terms["real_t"] + terms["fake_t"] + terms["real_s"] + terms["fake_s"]
    d_loss = -l_adv_d
    d_grads = _named_grads(dtape, d_loss, {"d_s": d_s, "d_t": d_t})
    clip_gradients(d_grads, cfg.clip_norm, inplace=True)
    adam_step(_prefixed(nets, ("d_s", "d_t")), d_grads, ckpt.opt["disc"], lr,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    # generators: descend on the weighted objective against the updated discriminators
    d_s_c = nets["d_s"].bind(gtape, trainable=False)
    d_t_c = nets["d_t"].bind(gtape, trainable=False)
    gen_st = lambda x: nets["g_st"].graph(g_st, x, steps)  # noqa: E731
    gen_ts = lambda x: nets["g_ts"].graph(g_ts, x, steps)  # noqa: E731
    l_cc = L.cycle_loss(s, t, gen_st, gen_ts, steps=steps, fake_t=fake_t, fake_s=fake_s)
    l_me = L.mouth_expression_loss(s, t, gen_st, gen_ts, mouth, steps=steps, fake_t=fake_t, fake_s=fake_s)
    l_adv_g = L.generator_adversarial(
        fake_t, fake_s,
        lambda x: nets["d_s"].graph(d_s_c, x, steps), lambda x: nets["d_t"].graph(d_t_c, x, steps),
        steps, cfg.non_saturating)
    total = L.total_loss((l_cc, l_adv_g, l_me), w)
    g_grads = _named_grads(gtape, total, {"g_st": g_st, "g_ts": g_ts})
    clip_gradients(g_grads, cfg.clip_norm, inplace=True)
    adam_step(_prefixed(nets, ("g_st", "g_ts")), g_grads, ckpt.opt["gen"], lr,
              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    return {
        "L_cc": float(l_cc.data),
        "L_adv_d": float(l_adv_d.data),
        "L_adv_g": float(l_adv_g.data),
        "L_me": float(l_me.data),
        "L_total": float(total.data),
    }


def _named_grads(tape: Tape, root, bound: dict[str, dict]) -> dict[str, np.ndarray]:
    grads = ad.backward(tape, root)
    return {f"{net}/{k}": grads[v.id] for net, params in bound.items() for k, v in params.items()}


def iterations_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return min(n_source, n_target) // batch_size


def train(config: TrainConfig, source_seq: ExpressionSequence, target_seq: ExpressionSequence,
          init: Checkpoint | None = None,
          callback: Callable[[int, dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run the full epoch budget; returns the final checkpoint and per-iteration losses."""
    if source_seq.dim != target_seq.dim:
        raise TrainingError(f"corpus widths differ: {source_seq.dim} vs {target_seq.dim}")
    src_windows, src_stats = prepare_corpus(source_seq, config)
    tgt_windows, tgt_stats = prepare_corpus(target_seq, config)
    if len(src_windows) == 0 or len(tgt_windows) == 0:
        raise TrainingError(
            f"no training windows of size {config.window} (source {len(src_windows)}, target {len(tgt_windows)})")
    per_epoch = iterations_per_epoch(len(src_windows), len(tgt_windows), config.batch_size)
    if per_epoch == 0:
        raise TrainingError(
            f"fewer windows ({min(len(src_windows), len(tgt_windows))}) than batch_size {config.batch_size}")
    stats = {"source": src_stats, "target": tgt_stats}
    if init is None:
        ckpt = init_checkpoint(config, source_seq.dim, stats)
    else:
        ckpt = replace(init, config=config, stats=stats)
        ckpt.opt.setdefault("gen", OptimizerState())
        ckpt.opt.setdefault("disc", OptimizerState())

    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(len(NETWORKS) + 1)[-1])
    history: list[dict] = []
    it = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.lr_decay_every:
            lr *= config.lr_decay_factor ** (epoch // config.lr_decay_every)
        src_order = rng.permutation(len(src_windows))
        tgt_order = rng.permutation(len(tgt_windows))
        for b in range(per_epoch):
            sel = slice(b * config.batch_size, (b + 1) * config.batch_size)
            try:
                row = train_step(ckpt, src_windows[src_order[sel]], tgt_windows[tgt_order[sel]], lr)
            except L.LossError as exc:
                raise TrainingError(f"{exc} at iteration {it} (epoch {epoch})") from exc
            bad = [k for k, v in row.items() if not math.isfinite(v)]
            if bad:
                raise TrainingError(f"non-finite loss {bad} at iteration {it}")
            row = {"iter": it, "epoch": epoch, **row}
            history.append(row)
            if callback is not None:
                callback(it, row)
            it += 1
        ckpt.epoch = epoch + 1
        last = history[-1]
        log.info("epoch %d/%d  L_cc=%.4f L_me=%.4f L_adv_d=%.4f L_adv_g=%.4f",
                 epoch + 1, config.epochs, last["L_cc"], last["L_me"], last["L_adv_d"], last["L_adv_g"])
    return ckpt, history


HISTORY_COLUMNS = ("iter", "L_cc", "L_adv_d", "L_adv_g", "L_me", "L_total")


def format_history(history: list[dict]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join([str(row["iter"])] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


# -- inference --------------------------------------------------------------

def apply_stats(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    return (frames - stats.mean) / np.maximum(stats.std, STD_EPS)


def translate_sequence(ckpt: Checkpoint, source_seq: ExpressionSequence, direction: str = "st") -> ExpressionSequence:
    """Translate every frame using the window that ends at it (start replicate-padded)."""
    gen = ckpt.generator(direction)
    names = ("source", "target") if direction == "st" else ("target", "source")
    missing = [n for n in names if n not in ckpt.stats]
    if missing:
        raise TrainingError(f"checkpoint lacks normalization stats for {missing}")
    in_stats, out_stats = (ckpt.stats[n] for n in names)
    if len(source_seq) == 0:
        return ExpressionSequence(np.zeros((0, source_seq.dim)), frame_rate=source_seq.frame_rate)
    normed = apply_stats(source_seq.frames, in_stats)
    windows = padded_windows(normed, ckpt.config.window)
    last = gen(windows)[:, -1, :]
    out = last * np.maximum(out_stats.std, STD_EPS) + out_stats.mean
    return ExpressionSequence(out, frame_rate=source_seq.frame_rate)


def interpolate_style(source_seq: ExpressionSequence, translated_seq: ExpressionSequence, alpha: float) -> ExpressionSequence:
    """Per-frame (1 - alpha) * source + alpha * translated."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if source_seq.frames.shape != translated_seq.frames.shape:
        raise ValueError(f"sequence shapes differ: {source_seq.frames.shape} vs {translated_seq.frames.shape}")
    out = (1.0 - alpha) * source_seq.frames + alpha * translated_seq.frames
    return ExpressionSequence(out, frame_rate=source_seq.frame_rate)
