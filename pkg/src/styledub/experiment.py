"""The synthetic style-transfer experiment: train on unpaired corpora, score the held-out split."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .synth import StyleMetrics, StyleSpec, eval_style, paired_style_corpora
from .trainer import Checkpoint, TrainConfig, train, translate_sequence

DEFAULT_FRAMES = 2000
DEFAULT_TRAIN_FRAMES = 1000
DEFAULT_TARGET_GAIN = 2.0


@dataclass
class ExperimentResult:
    metrics: StyleMetrics
    checkpoint: Checkpoint
    history: list[dict]
    timings: dict[str, float] = field(default_factory=dict)


def run_style_experiment(config: TrainConfig | None = None, frames: int = DEFAULT_FRAMES,
                         target_gain: float = DEFAULT_TARGET_GAIN, content_seed: int = 1,
                         callback=None) -> ExperimentResult:
    """Source mouth gain 1, target mouth gain ``target_gain``; evaluate S->T on the frames after the training split."""
    config = TrainConfig(train_frames=DEFAULT_TRAIN_FRAMES) if config is None else config
    if config.train_frames >= frames:
        raise ValueError(f"train_frames ({config.train_frames}) leaves no held-out frames out of {frames}")
    src_spec = StyleSpec(mouth=config.mouth_indices)
    tgt_spec = src_spec.with_mouth_gain(target_gain)
    source, target, oracle = paired_style_corpora(content_seed, src_spec, tgt_spec, frames)

    t0 = time.perf_counter()
    ckpt, history = train(config, source, target, callback=callback)
    t1 = time.perf_counter()
    test = source.slice(config.train_frames)
    translated = translate_sequence(ckpt, test, "st")
    metrics = eval_style(test, translated, ckpt.stats["target"], oracle.slice(config.train_frames), config.mouth)
    t2 = time.perf_counter()
    return ExperimentResult(metrics, ckpt, history, {"train_s": t1 - t0, "eval_s": t2 - t1})
