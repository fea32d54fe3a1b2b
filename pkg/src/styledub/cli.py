"""Command-line entry point.

    styledub synth --frames 2000 --seed 1 --out data/
    styledub train data/source.csv data/target.csv --config cfg.json --out model.dstw
    styledub translate model.dstw data/source.csv --direction st --out translated.csv
    styledub interpolate data/source.csv translated.csv --alpha 0.5 --out blend.csv
    styledub eval data/source.csv translated.csv --checkpoint model.dstw
    styledub composite fg.ppm bg.ppm mask.pgm --out out.ppm
    styledub rerun out.ppm.manifest.json

Every command writes ``<output>.manifest.json`` (``manifest.json`` inside the
output directory for ``synth``) recording its resolved arguments; ``rerun``
replays one.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .compositor import (
    composite,
    default_radius,
    default_sigma,
    feather_mask,
    erode_mask,
    read_pgm_mask,
    read_ppm,
    write_ppm,
)
from .params import ExpressionSequence, read_sequence, write_sequence, SequenceFormatError
from .synth import StyleSpec, eval_style, paired_style_corpora, SpecError
from .trainer import (
    TrainConfig,
    format_history,
    interpolate_style,
    load_checkpoint,
    save_checkpoint,
    train,
    translate_sequence,
)
from .params import normalize_sequence

log = logging.getLogger("styledub")


class CommandError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: int | None
    version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "version": self.version,
            "timings": self.timings,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**d)


class Outputs:
    """Tracks files written by a command so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self):
        for p in self.paths:
            p.unlink(missing_ok=True)


def _read_seq(path) -> ExpressionSequence:
    if not Path(path).exists():
        raise CommandError(f"{path}: no such file")
    return read_sequence(path)


# -- commands ---------------------------------------------------------------

def cmd_synth(args, out: Outputs) -> dict:
    for p in (args.source_spec, args.target_spec):
        if p and not Path(p).exists():
            raise CommandError(f"{p}: no such file")
    src = StyleSpec.load(args.source_spec) if args.source_spec else StyleSpec()
    if args.target_spec:
        tgt = StyleSpec.load(args.target_spec)
    else:
        tgt = src.with_mouth_gain(args.target_mouth_gain)
    source, target, oracle = paired_style_corpora(args.seed, src, tgt, args.frames)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for name, seq in (("source", source), ("target", target), ("oracle", oracle)):
        write_sequence(out.add(d / f"{name}.csv"), seq)
    return {"source_spec": src.to_dict(), "target_spec": tgt.to_dict(), "frames": args.frames}


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "train_frames": args.train_frames,
        "gen_width": args.gen_width, "batch_size": args.batch_size,
    }
    d = cfg.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def cmd_train(args, out: Outputs) -> dict:
    cfg = _train_config(args)
    source = _read_seq(args.source)
    target = _read_seq(args.target)
    ckpt, history = train(cfg, source, target)
    save_checkpoint(ckpt, out.add(args.out))
    out.add(str(args.out) + ".history.csv").write_text(format_history(history), encoding="utf-8")
    return cfg.to_dict()


def cmd_translate(args, out: Outputs) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    seq = _read_seq(args.input)
    result = translate_sequence(ckpt, seq, args.direction)
    write_sequence(out.add(args.out), result)
    return {"direction": args.direction}


def cmd_interpolate(args, out: Outputs) -> dict:
    src = _read_seq(args.source)
    tr = _read_seq(args.translated)
    write_sequence(out.add(args.out), interpolate_style(src, tr, args.alpha))
    return {"alpha": args.alpha}


def cmd_eval(args, out: Outputs) -> dict:
    src = _read_seq(args.source)
    tr = _read_seq(args.translated)
    if args.checkpoint:
        stats = load_checkpoint(args.checkpoint).stats["target"]
    elif args.target_corpus:
        stats = normalize_sequence(_read_seq(args.target_corpus))[1]
    else:
        raise CommandError("eval needs --checkpoint or --target-corpus for target statistics")
    oracle = _read_seq(args.oracle) if args.oracle else None
    metrics = eval_style(src, tr, stats, oracle)
    text = json.dumps(metrics.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        out.add(args.out).write_text(text + "\n", encoding="utf-8")
    return {}


def cmd_composite(args, out: Outputs) -> dict:
    fg = read_ppm(args.fg)
    bg = read_ppm(args.bg)
    mask = read_pgm_mask(args.mask)
    width = mask.shape[1]
    radius = default_radius(width) if args.radius is None else args.radius
    sigma = default_sigma(width) if args.sigma is None else args.sigma
    binary = (mask >= 0.5).astype(float)
    soft = feather_mask(erode_mask(binary, radius), sigma)
    write_ppm(out.add(args.out), composite(fg, bg, soft))
    return {"radius": radius, "sigma": sigma}


def cmd_rerun(args, out: Outputs) -> dict:
    manifest = RunManifest.read(args.manifest)
    return {"rerun": main(manifest.argv)}


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styledub", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate paired-style synthetic corpora")
    s.add_argument("--source-spec", help="style spec JSON for the source actor (default: unit mouth gain)")
    s.add_argument("--target-spec", help="style spec JSON for the target actor (default: source spec with --target-mouth-gain)")
    s.add_argument("--target-mouth-gain", type=float, default=2.0, help="target mouth gain when --target-spec is absent")
    s.add_argument("--frames", type=int, default=2000, help="frames per corpus")
    s.add_argument("--seed", type=int, default=1, help="content seed")
    s.add_argument("--out", required=True, help="output directory for source.csv, target.csv, oracle.csv")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the translation networks")
    s.add_argument("source", help="source-actor expression sequence (.csv or .dseq)")
    s.add_argument("target", help="target-actor expression sequence (.csv or .dseq)")
    s.add_argument("--config", help="TrainConfig JSON; flags below override it")
    s.add_argument("--seed", type=int, help="training seed")
    s.add_argument("--epochs", type=int, help="number of epochs")
    s.add_argument("--train-frames", type=int, help="leading frames of each corpus used for training")
    s.add_argument("--gen-width", type=int, help="generator hidden width")
    s.add_argument("--batch-size", type=int, help="windows per batch")
    s.add_argument("--out", required=True, help="checkpoint path; history goes to <out>.history.csv")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="translate an expression sequence")
    s.add_argument("checkpoint", help="trained checkpoint")
    s.add_argument("input", help="expression sequence to translate")
    s.add_argument("--direction", choices=("st", "ts"), default="st", help="source->target or target->source")
    s.add_argument("--out", required=True, help="output sequence path")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("interpolate", help="blend source and translated sequences")
    s.add_argument("source", help="original sequence")
    s.add_argument("translated", help="translated sequence of the same length")
    s.add_argument("--alpha", type=float, required=True, help="0 keeps the source, 1 gives the translation")
    s.add_argument("--out", required=True, help="output sequence path")
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("eval", help="style metrics of a translation, printed as JSON")
    s.add_argument("source", help="original sequence")
    s.add_argument("translated", help="its translation")
    s.add_argument("--checkpoint", help="take target statistics from this checkpoint")
    s.add_argument("--target-corpus", help="take target statistics from this sequence")
    s.add_argument("--oracle", help="ground-truth translation, adds oracle_cosine and oracle_rmse")
    s.add_argument("--out", help="also write the JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("composite", help="composite a face layer over a background")
    s.add_argument("fg", help="foreground (rendered face) PPM")
    s.add_argument("bg", help="background frame PPM")
    s.add_argument("mask", help="face mask PGM, binarized at 0.5")
    s.add_argument("--radius", type=int, help="erosion radius in pixels (default scales with width)")
    s.add_argument("--sigma", type=float, help="feathering sigma in pixels (default scales with width)")
    s.add_argument("--out", required=True, help="output PPM")
    s.set_defaults(func=cmd_composite)

    s = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    s.add_argument("manifest", help="manifest JSON written next to a previous output")
    s.set_defaults(func=cmd_rerun)
    return p


def _manifest_path(args) -> Path | None:
    if args.command == "rerun":
        return None
    if args.command == "synth":
        return Path(args.out) / "manifest.json"
    if getattr(args, "out", None):
        return Path(str(args.out) + ".manifest.json")
    return None


def _inputs(args) -> list[str]:
    names = ("source", "target", "checkpoint", "input", "translated", "fg", "bg", "mask",
             "config", "source_spec", "target_spec", "oracle", "target_corpus")
    return [str(getattr(args, n)) for n in names if getattr(args, n, None)]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Outputs()
    t0 = time.perf_counter()
    try:
        config = args.func(args, out)
        if args.command == "rerun":
            return config["rerun"]
        mpath = _manifest_path(args)
        if mpath is not None:
            manifest = RunManifest(args.command, argv, config, _inputs(args),
                                   [str(p) for p in out.paths], config.get("seed", getattr(args, "seed", None)),
                                   timings={"wall_s": round(time.perf_counter() - t0, 3)})
            out.add(mpath)
            manifest.write(mpath)
    except (CommandError, SequenceFormatError, SpecError, OSError, ValueError, RuntimeError) as exc:
        out.cleanup()
        print(f"styledub {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.cleanup()
        raise
    return 0
