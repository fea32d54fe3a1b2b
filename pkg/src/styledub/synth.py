"""Synthetic two-actor expression corpora with a known style relationship.

Content (mouth phases and white noise) is drawn from a content seed; a
:class:`StyleSpec` turns content into coefficients. Mouth coefficients carry a
sum of sinusoids, every coefficient carries exponentially smoothed noise, and
the result is scaled by a per-coefficient gain and shifted by an offset:

    delta[t, j] = gain[j] * (mouth[j] * pattern_j(t) + noise_j(t)) + offset[j]

Because the same content can be rendered in two styles, the ground-truth
target-styled version of every source frame is known exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .params import EXPR_DIM, ExpressionSequence, MouthIndexSet, NormStats


class SpecError(ValueError):
    pass


@dataclass
class Sinusoid:
    amplitude: float = 1.0
    frequency: float = 0.05  # cycles per frame
    phase: float = 0.0


def _default_sinusoids() -> list[Sinusoid]:
    return [Sinusoid(1.0, 0.043, 0.0), Sinusoid(0.6, 0.11, 1.3), Sinusoid(0.3, 0.017, 2.1)]


@dataclass
class StyleSpec:
    gain: np.ndarray = field(default_factory=lambda: np.ones(EXPR_DIM))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(EXPR_DIM))
    half_life: float = 10.0
    sinusoids: list[Sinusoid] = field(default_factory=_default_sinusoids)
    noise: float = 0.3
    mouth: tuple[int, ...] = tuple(range(10))

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.sinusoids = [s if isinstance(s, Sinusoid) else Sinusoid(**s) for s in self.sinusoids]
        self.mouth = tuple(int(i) for i in self.mouth)
        self.validate()

    @property
    def dim(self) -> int:
        return self.gain.shape[0]

    def validate(self) -> None:
        if self.gain.ndim != 1 or self.offset.shape != self.gain.shape:
            raise SpecError(f"gain/offset must be equal-length vectors, got {self.gain.shape} and {self.offset.shape}")
        if not np.all(self.gain > 0):
            raise SpecError("gains must be positive")
        if not np.all(np.isfinite(self.offset)):
            raise SpecError("offsets must be finite")
        if not self.half_life > 0:
            raise SpecError(f"half_life must be positive, got {self.half_life}")
        if not self.noise >= 0:
            raise SpecError(f"noise amplitude must be nonnegative, got {self.noise}")
        for s in self.sinusoids:
            if not 0 < s.frequency < 0.5:
                raise SpecError(f"sinusoid frequency {s.frequency} outside (0, 0.5)")
        MouthIndexSet(self.mouth, dim=self.dim)

    def with_mouth_gain(self, g: float) -> "StyleSpec":
        gain = self.gain.copy()
        gain[list(self.mouth)] = g
        return StyleSpec(gain, self.offset.copy(), self.half_life, list(self.sinusoids), self.noise, self.mouth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain"] = self.gain.tolist()
        d["offset"] = self.offset.tolist()
        d["mouth"] = list(self.mouth)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StyleSpec":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "StyleSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (TypeError, json.JSONDecodeError) as exc:
            raise SpecError(f"{path}: invalid style spec: {exc}") from None


@dataclass
class Content:
    """Style-independent randomness: per-coefficient phase shifts and white noise."""

    phases: np.ndarray  # (dim,)
    white: np.ndarray  # (frames, dim)

    @classmethod
    def draw(cls, seed: int, frames: int, dim: int = EXPR_DIM) -> "Content":
        rng = np.random.default_rng(seed)
        phases = rng.uniform(0.0, 2 * np.pi, size=dim)
        white = rng.standard_normal((frames, dim))
        return cls(phases, white)


def smooth_noise(white: np.ndarray, half_life: float) -> np.ndarray:
    """First-order exponential filter scaled to unit stationary variance."""
    a = 0.5 ** (1.0 / half_life)
    k = np.sqrt(1.0 - a * a)
    out = np.empty_like(white)
    state = white[0].copy()  # start in the stationary distribution
    out[0] = state
    for t in range(1, white.shape[0]):
        state = a * state + k * white[t]
        out[t] = state
    return out


def mouth_pattern(spec: StyleSpec, phases: np.ndarray, t: np.ndarray) -> np.ndarray:
    """(frames, dim) sinusoid pattern, nonzero on mouth coefficients only."""
    out = np.zeros((t.shape[0], spec.dim))
    idx = list(spec.mouth)
    for s in spec.sinusoids:
        out[:, idx] += s.amplitude * np.sin(2 * np.pi * s.frequency * t[:, None] + s.phase + phases[idx])
    return out


def render(spec: StyleSpec, content: Content, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Render content frames [start, stop) in the given style."""
    stop = content.white.shape[0] if stop is None else stop
    t = np.arange(start, stop, dtype=np.float64)
    noise = smooth_noise(content.white, spec.half_life)[start:stop]
    return spec.gain * (mouth_pattern(spec, content.phases, t) + spec.noise * noise) + spec.offset


def gen_corpus(spec: StyleSpec, frames: int, seed: int, frame_rate: float = 25.0) -> ExpressionSequence:
    if frames < 2:
        raise SpecError(f"frames must be >= 2, got {frames}")
    spec.validate()
    content = Content.draw(seed, frames, spec.dim)
    return ExpressionSequence(render(spec, content), frame_rate=frame_rate)


def paired_style_corpora(content_seed: int, spec_src: StyleSpec, spec_tgt: StyleSpec, frames: int,
                         frame_rate: float = 25.0):
    """Source and target corpora cut from disjoint halves of one content stream.

    The source renders content frames [0, frames) in the source style and the
    target renders [frames, 2*frames) in the target style, so no source frame
    has a time-aligned partner in the target corpus. The oracle renders the
    source half in the target style: oracle[i] is the ground-truth
    translation of source[i].
    """
    if frames < 2:
        raise SpecError(f"frames must be >= 2, got {frames}")
    if spec_src.dim != spec_tgt.dim or spec_src.mouth != spec_tgt.mouth:
        raise SpecError("source and target specs must share dimension and mouth indices")
    spec_src.validate()
    spec_tgt.validate()
    content = Content.draw(content_seed, 2 * frames, spec_src.dim)
    source = render(spec_src, content, 0, frames)
    target = render(spec_tgt, content, frames, 2 * frames)
    oracle = render(spec_tgt, content, 0, frames)
    return (ExpressionSequence(source, frame_rate=frame_rate),
            ExpressionSequence(target, frame_rate=frame_rate),
            ExpressionSequence(oracle, frame_rate=frame_rate))


@dataclass
class StyleMetrics:
    mouth_cosine: float
    amplitude_ratio: float
    mean_distance: float
    var_distance: float
    oracle_cosine: float | None = None
    oracle_rmse: float | None = None
    degenerate_frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _frame_cosines(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, int]:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= eps) & (nb >= eps)
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return cos, int((~ok).sum())


def _rms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(x * x, axis=0))


def eval_style(source: ExpressionSequence, translated: ExpressionSequence, target_stats: NormStats,
               oracle: ExpressionSequence | None = None, m: MouthIndexSet | None = None) -> StyleMetrics:
    """Compare a translation against its source and the target corpus.

    - ``mouth_cosine``: mean frame-wise cosine of mouth sub-vectors, source vs translated
    - ``amplitude_ratio``: translated RMS / source RMS per mouth coefficient, averaged
    - ``mean_distance``/``var_distance``: mean absolute difference of per-coefficient
      mean and variance between the translation and the target corpus
    """
    m = MouthIndexSet() if m is None else m
    if source.frames.shape != translated.frames.shape:
        raise ValueError(f"length mismatch: source {source.frames.shape} vs translated {translated.frames.shape}")
    src_m = source.frames[:, m.array]
    tr_m = translated.frames[:, m.array]
    cos, degenerate = _frame_cosines(src_m, tr_m)
    ratio = float(np.mean(_rms(tr_m) / _rms(src_m)))
    mean_d = float(np.mean(np.abs(translated.frames.mean(axis=0) - target_stats.mean)))
    var_d = float(np.mean(np.abs(translated.frames.var(axis=0) - target_stats.std ** 2)))
    oc = orm = None
    if oracle is not None:
        if oracle.frames.shape != translated.frames.shape:
            raise ValueError("oracle length does not match the translation")
        oc = float(np.mean(_frame_cosines(oracle.frames[:, m.array], tr_m)[0]))
        orm = float(np.sqrt(np.mean((oracle.frames - translated.frames) ** 2)))
    return StyleMetrics(float(np.mean(cos)) if cos.size else 0.0, ratio, mean_d, var_d, oc, orm, degenerate)
