"""Per-frame face parameters, expression sequences and windowing.

A frame is described by a 261-dim vector made of pose, identity, reflectance,
expression, illumination and pupil blocks. Only the 64 expression
coefficients are consumed by the translation networks.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

EXPR_DIM = 64
STD_EPS = 1e-8

# (field name, size) in packing order
BLOCKS: tuple[tuple[str, int], ...] = (
    ("pose", 6),
    ("identity_alpha", 80),
    ("reflectance_beta", 80),
    ("expression_delta", EXPR_DIM),
    ("illumination_gamma", 27),
    ("eye_left", 2),
    ("eye_right", 2),
)
PARAM_DIM = sum(n for _, n in BLOCKS)

DSEQ_MAGIC = b"DSEQ"
DSEQ_VERSION = 1


class ParameterError(ValueError):
    """Raised for malformed parameter vectors or sequences."""


class SequenceFormatError(ParameterError):
    """A sequence file could not be parsed."""

    def __init__(self, message: str, path=None, row: int | None = None, column: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.row = row
        self.column = column


@dataclass
class ParameterVector:
    pose: np.ndarray
    identity_alpha: np.ndarray
    reflectance_beta: np.ndarray
    expression_delta: np.ndarray
    illumination_gamma: np.ndarray
    eye_left: np.ndarray
    eye_right: np.ndarray

    @classmethod
    def zeros(cls) -> "ParameterVector":
        return cls(**{name: np.zeros(n) for name, n in BLOCKS})

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def pack_parameters(v: ParameterVector) -> np.ndarray:
    """Concatenate the blocks of ``v`` into a flat 261-vector."""
    parts = []
    for name, n in BLOCKS:
        block = np.asarray(getattr(v, name), dtype=np.float64)
        if block.shape != (n,):
            raise ParameterError(f"field {name!r} has shape {block.shape}, expected ({n},)")
        parts.append(block)
    return np.concatenate(parts)


def unpack_parameters(flat) -> ParameterVector:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.shape[0] != PARAM_DIM:
        raise ParameterError(f"expected a flat vector of length {PARAM_DIM}, got shape {flat.shape}")
    out = {}
    start = 0
    for name, n in BLOCKS:
        out[name] = flat[start:start + n].copy()
        start += n
    return ParameterVector(**out)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ParameterError(f"stats shape mismatch: mean {self.mean.shape}, std {self.std.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, dim: int = EXPR_DIM) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))


@dataclass(frozen=True)
class ExpressionSequence:
    """Ordered per-frame expression vectors, shape (frames, 64)."""

    frames: np.ndarray
    stats: NormStats | None = None
    frame_rate: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ParameterError(f"frames must be a 2-D array, got shape {frames.shape}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def slice(self, start: int, stop: int | None = None) -> "ExpressionSequence":
        return ExpressionSequence(self.frames[start:stop], self.stats, self.frame_rate)


def normalize_sequence(seq: ExpressionSequence) -> tuple[ExpressionSequence, NormStats]:
    """Zero-mean, unit-variance per coefficient (population std)."""
    if len(seq) < 2:
        raise ParameterError(f"normalization needs at least 2 frames, got {len(seq)}")
    mean = seq.frames.mean(axis=0)
    std = seq.frames.std(axis=0)
    stats = NormStats(mean, std)
    out = (seq.frames - mean) / np.maximum(std, STD_EPS)
    return ExpressionSequence(out, stats, seq.frame_rate), stats


def denormalize_sequence(seq: ExpressionSequence, stats: NormStats | None = None) -> ExpressionSequence:
    stats = stats if stats is not None else seq.stats
    if stats is None:
        raise ParameterError("denormalization requires normalization stats")
    if stats.dim != seq.dim:
        raise ParameterError(f"stats dimension {stats.dim} does not match sequence dimension {seq.dim}")
    out = seq.frames * np.maximum(stats.std, STD_EPS) + stats.mean
    return ExpressionSequence(out, None, seq.frame_rate)


def sliding_windows(seq, n: int) -> np.ndarray:
    """All length-``n`` windows, oldest frame first: shape (L-n+1, n, dim).

    Returns an empty (0, n, dim) array when the sequence is shorter than ``n``.
    """
    if n < 1:
        raise ParameterError(f"window size must be >= 1, got {n}")
    frames = seq.frames if isinstance(seq, ExpressionSequence) else np.asarray(seq, dtype=np.float64)
    count = max(0, frames.shape[0] - n + 1)
    if count == 0:
        return np.zeros((0, n, frames.shape[1]))
    idx = np.arange(count)[:, None] + np.arange(n)[None, :]
    return frames[idx]


def padded_windows(frames: np.ndarray, n: int) -> np.ndarray:
    """One window per frame, ending at that frame; the start is replicate-padded."""
    frames = np.asarray(frames, dtype=np.float64)
    padded = np.concatenate([np.repeat(frames[:1], n - 1, axis=0), frames])
    return sliding_windows(padded, n)


@dataclass(frozen=True)
class MouthIndexSet:
    indices: tuple[int, ...] = tuple(range(10))
    size: int = field(default=10, repr=False)
    dim: int = field(default=EXPR_DIM, repr=False)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) != self.size:
            raise ParameterError(f"expected {self.size} mouth indices, got {len(idx)}")
        if len(set(idx)) != len(idx):
            raise ParameterError(f"mouth indices must be distinct: {idx}")
        bad = [i for i in idx if not 0 <= i < self.dim]
        if bad:
            raise ParameterError(f"mouth indices out of range [0, {self.dim}): {bad}")
        object.__setattr__(self, "indices", idx)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.indices, dtype=np.intp)


def select_mouth(delta, m: MouthIndexSet) -> np.ndarray:
    """Gather the mouth coefficients along the last axis."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape[-1] != m.dim:
        raise ParameterError(f"expected last dimension {m.dim}, got {delta.shape[-1]}")
    return delta[..., m.array]


# -- file formats -----------------------------------------------------------

def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def parse_csv_frames(text: str, path=None, expected_dims: Iterable[int] | None = None) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(c.strip() for c in rows[-1]):
        rows.pop()
    if rows and rows[0] and not _is_number(rows[0][0].strip()):
        body = list(enumerate(rows[1:], start=2))
    else:
        body = list(enumerate(rows, start=1))
    if not body:
        raise SequenceFormatError("no frames", path)
    width = len(body[0][1])
    out = np.empty((len(body), width))
    for k, (rowno, row) in enumerate(body):
        if len(row) != width:
            raise SequenceFormatError(f"expected {width} columns, got {len(row)}", path, row=rowno)
        for col, cell in enumerate(row):
            try:
                out[k, col] = float(cell)
            except ValueError:
                raise SequenceFormatError(f"not a number: {cell!r}", path, row=rowno, column=col + 1) from None
    if expected_dims is not None and width not in tuple(expected_dims):
        raise SequenceFormatError(f"unexpected column count {width}", path)
    return out


def format_csv_frames(frames: np.ndarray) -> str:
    buf = io.StringIO()
    for row in np.asarray(frames, dtype=np.float64):
        buf.write(",".join(repr(float(x)) for x in row))
        buf.write("\n")
    return buf.getvalue()


def encode_dseq(frames: np.ndarray) -> bytes:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    if frames.ndim != 2:
        raise ParameterError(f"frames must be 2-D, got shape {frames.shape}")
    header = DSEQ_MAGIC + struct.pack("<III", DSEQ_VERSION, frames.shape[0], frames.shape[1])
    return header + frames.tobytes()


def decode_dseq(blob: bytes, path=None) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != DSEQ_MAGIC:
        raise SequenceFormatError("bad magic, not a DSEQ file", path)
    version, count, dim = struct.unpack("<III", blob[4:16])
    if version != DSEQ_VERSION:
        raise SequenceFormatError(f"unsupported DSEQ version {version} (expected {DSEQ_VERSION})", path)
    need = 16 + 8 * count * dim
    if len(blob) != need:
        raise SequenceFormatError(f"expected {need} bytes, got {len(blob)}", path)
    return np.frombuffer(blob, dtype="<f8", offset=16).reshape(count, dim).astype(np.float64)


def read_frames(path) -> np.ndarray:
    """Read a CSV or DSEQ file into a (frames, dim) array."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == DSEQ_MAGIC:
        return decode_dseq(blob, path)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError:
        raise SequenceFormatError("not UTF-8 text", path) from None
    return parse_csv_frames(text, path, expected_dims=(EXPR_DIM, PARAM_DIM))


def read_sequence(path, frame_rate: float = 25.0) -> ExpressionSequence:
    """Load expression frames; full 261-column files are reduced to their expression block."""
    frames = read_frames(path)
    if frames.shape[1] == PARAM_DIM:
        start = sum(n for name, n in BLOCKS[:3])
        frames = frames[:, start:start + EXPR_DIM]
    return ExpressionSequence(frames, frame_rate=frame_rate)


def write_sequence(path, frames, binary: bool | None = None) -> None:
    path = Path(path)
    frames = frames.frames if isinstance(frames, ExpressionSequence) else np.asarray(frames)
    if binary is None:
        binary = path.suffix.lower() in (".dseq", ".bin")
    if binary:
        path.write_bytes(encode_dseq(frames))
    else:
        path.write_text(format_csv_frames(frames), encoding="utf-8")

