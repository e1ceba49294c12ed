"""Command-line entry point: ``calligen <subcommand> ...``.

Relative paths are resolved against ``--workdir`` (default: current directory).
``train`` reads a JSON config from ``--config`` or ``$CALLIGEN_CONFIG`` when given;
explicit flags override its values.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from calligen.backbone import ModelConfig
from calligen.binarize import SegmentationError, binarize_and_normalize
from calligen.codec import Codec
from calligen.corpus import (
    CorpusScanError,
    SplitError,
    build_experiment_split,
    build_label_registry,
    corpus_stats,
    read_manifest,
    scan_corpus,
    write_manifest,
)
from calligen.evaluation import evaluate_split
from calligen.labels import LabelRegistry, LabelTriple, UnknownLabelError
from calligen.sampling import SAMPLERS, generate_images
from calligen.synth import synth_corpus
from calligen.training import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, train

CONFIG_ENV = "CALLIGEN_CONFIG"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_DATA = 4
EXIT_DIVERGED = 5


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    artifacts: list[Path] = field(default_factory=list)
    summary: str = ""


class UsageError(Exception):
    pass


def _path(args: argparse.Namespace, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else Path(args.workdir) / p


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace) -> CommandResult:
    out = _path(args, args.out)
    records = synth_corpus(out, per_triple=args.per_triple, seed=args.seed, side=args.side)
    return CommandResult(artifacts=[out], summary=f"wrote {len(records)} synthetic glyphs to {out}")


def cmd_prepare(args: argparse.Namespace) -> CommandResult:
    root = _require(_path(args, args.root), "corpus root")
    out = _path(args, args.out)
    records = scan_corpus(root)
    prepared = []
    for i, rec in enumerate(records):
        with Image.open(rec.path) as im:
            image = np.asarray(im.convert("RGB"))
        norm = binarize_and_normalize(image, seed=args.seed + i, size=args.size, source=str(rec.path))
        dest = out / "images" / rec.calligrapher / rec.font / rec.character / rec.path.name
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(norm, mode="L").save(dest)
        prepared.append(replace(rec, path=dest))
    manifest, registry_path = out / "manifest.jsonl", out / "registry.json"
    write_manifest(prepared, manifest)
    build_label_registry(prepared).save(registry_path)
    return CommandResult(artifacts=[out / "images", manifest, registry_path],
                         summary=f"prepared {len(prepared)} images into {out}")


def cmd_stats(args: argparse.Namespace) -> CommandResult:
    if args.manifest:
        records = read_manifest(_require(_path(args, args.manifest), "manifest"))
    else:
        records = scan_corpus(_require(_path(args, args.root), "corpus root"), verify=False)
    stats = corpus_stats(records)
    text = json.dumps(stats, ensure_ascii=False, indent=2)
    artifacts = []
    if args.out:
        out = _path(args, args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        artifacts.append(out)
    return CommandResult(artifacts=artifacts, summary=text)


def cmd_split(args: argparse.Namespace) -> CommandResult:
    manifest = _require(_path(args, args.manifest), "manifest")
    out = _path(args, args.out) if args.out else manifest.parent
    records = read_manifest(manifest)
    train_set, test_set = build_experiment_split(
        records, args.n_calligraphers, args.n_characters, args.train_frac, args.max_per_character, args.seed
    )
    train_path, test_path = out / "train.jsonl", out / "test.jsonl"
    write_manifest(train_set, train_path)
    write_manifest(test_set, test_path)
    artifacts = [train_path, test_path]
    registry_src = manifest.parent / "registry.json"
    if out.resolve() != manifest.parent.resolve():
        registry = LabelRegistry.load(registry_src) if registry_src.exists() else build_label_registry(records)
        registry.save(out / "registry.json")
        artifacts.append(out / "registry.json")
    return CommandResult(artifacts=artifacts, summary=f"train {len(train_set)} / test {len(test_set)} images")


def _train_config(args: argparse.Namespace) -> TrainConfig:
    config_path = args.config or os.environ.get(CONFIG_ENV)
    doc: dict = {}
    if config_path:
        doc = json.loads(_require(_path(args, config_path), "train config").read_text(encoding="utf-8"))
    manifest = args.manifest or doc.get("manifest")
    if not manifest:
        raise UsageError("train needs --manifest (or a config with a manifest entry)")
    manifest_path = _require(_path(args, manifest), "manifest")
    registry = LabelRegistry.load(_require(manifest_path.parent / "registry.json", "registry.json next to manifest"))

    model = dict(doc.get("model", {}))
    model.update(num_calligraphers=registry.sizes[0], num_fonts=registry.sizes[1], num_characters=registry.sizes[2])
    for flag, key in (("width", "hidden_width"), ("depth", "depth"), ("patch", "patch_side"),
                      ("state_dim", "state_dim"), ("head_dim", "head_dim"), ("image_side", "latent_side")):
        if getattr(args, flag) is not None:
            model[key] = getattr(args, flag)
    if "hidden_width" in model and "head_dim" not in model:
        # narrow models get smaller heads instead of failing the divisibility check
        model["head_dim"] = math.gcd(model["hidden_width"], ModelConfig.head_dim)
    model_cfg = ModelConfig(**model)
    codec = dict(doc.get("codec", {}))
    codec.setdefault("kind", "identity")
    codec.update(latent_side=model_cfg.latent_side, latent_channels=model_cfg.latent_channels)
    if codec["kind"] == "identity":
        codec.update(image_side=model_cfg.latent_side, image_channels=model_cfg.latent_channels)

    doc.update(model=model_cfg.to_dict(), codec=codec, manifest=str(manifest_path))
    for flag, key in (("steps", "max_steps"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("ema", "ema_decay"), ("checkpoint_every", "checkpoint_every"), ("threads", "num_threads")):
        if getattr(args, flag) is not None:
            doc[key] = getattr(args, flag)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.compile:
        doc["compile"] = True
    return TrainConfig.from_dict(doc)


def cmd_train(args: argparse.Namespace) -> CommandResult:
    config = _train_config(args)
    out = _path(args, args.out)
    final = train(config, out)
    return CommandResult(artifacts=[final, out / "train_log.jsonl"],
                         summary=f"trained {config.max_steps} steps; checkpoint {final}")


def _resolve_label(registry: LabelRegistry, section: str, value: str) -> int:
    names = getattr(registry, section)
    if value in names:
        return names.index(value)
    if value.lstrip("-").isdigit():
        idx = int(value)
        if 0 <= idx < len(names):
            return idx
        raise UnknownLabelError(f"{section[:-1]} id {idx} outside [0, {len(names)})")
    raise UnknownLabelError(f"unknown {section[:-1]} {value!r}")


def cmd_sample(args: argparse.Namespace) -> CommandResult:
    ckpt = load_checkpoint(_require(_path(args, args.checkpoint), "checkpoint"))
    reg = ckpt.registry
    triple = LabelTriple(
        _resolve_label(reg, "calligraphers", args.calligrapher),
        _resolve_label(reg, "fonts", args.font),
        _resolve_label(reg, "characters", args.character),
    )
    config = ckpt.config
    image = generate_images(ckpt.sampling_model, [triple], config.schedule(), Codec(config.codec),
                            seed=args.seed, sampler=args.sampler, steps=args.steps)[0]
    info = PngImagePlugin.PngInfo()
    names = reg.decode(triple)
    info.add_text("labels", json.dumps(dict(zip(("calligrapher", "font", "character"), names)), ensure_ascii=False))
    info.add_text("seed", str(args.seed))
    side = image.shape[0]
    if side != args.size:
        image = np.asarray(Image.fromarray(image).resize((args.size, args.size), Image.NEAREST))
        info.add_text("upscaled", f"nearest {side}->{args.size}")
    out = _path(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="L").save(out, pnginfo=info)
    return CommandResult(artifacts=[out], summary=f"sampled {names} -> {out}")


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    ckpt = load_checkpoint(_require(_path(args, args.checkpoint), "checkpoint"))
    records = read_manifest(_require(_path(args, args.manifest), "test manifest"))
    if args.limit:
        records = records[: args.limit]
    report = evaluate_split(ckpt, records, seed=args.seed, sampler=args.sampler, steps=args.steps)
    artifacts = report.write(_path(args, args.out))
    return CommandResult(artifacts=artifacts, summary=report.to_table())


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    def common(seed_default: Optional[int] = 0) -> list[argparse.ArgumentParser]:
        # a fresh parent per subcommand: argparse shares parent actions, so defaults must not be mutated
        parent = argparse.ArgumentParser(add_help=False)
        parent.add_argument("--workdir", default=".", help="base directory for relative paths")
        parent.add_argument("--seed", type=int, default=seed_default)
        parent.add_argument("-v", "--verbose", action="store_true")
        return [parent]

    parser = argparse.ArgumentParser(prog="calligen", description="Label-conditioned calligraphy diffusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=common(), help="write the procedural toy glyph corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-triple", type=int, default=40)
    p.add_argument("--side", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=common(), help="binarize + normalize a corpus, write manifest and registry")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("stats", parents=common(), help="image counts per calligrapher / font / character")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--root")
    src.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", parents=common(), help="balanced train/test split with held-out characters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--n-calligraphers", type=int, default=40)
    p.add_argument("--n-characters", type=int, default=40)
    p.add_argument("--train-frac", type=float, default=0.9)
    p.add_argument("--max-per-character", type=int, default=4)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=common(seed_default=None), help="train the denoiser")
    p.add_argument("--config", help=f"JSON train config (default ${CONFIG_ENV})")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ema", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--state-dim", type=int)
    p.add_argument("--head-dim", type=int, help="channels per scan head (must divide --width)")
    p.add_argument("--image-side", type=int)
    p.add_argument("--compile", action="store_true", help="use torch.compile for the training forward pass")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=common(), help="generate one glyph PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calligrapher", required=True, help="name or numeric id")
    p.add_argument("--font", required=True, help="name or numeric id")
    p.add_argument("--character", required=True, help="name or numeric id")
    p.add_argument("--out", required=True)
    p.add_argument("--sampler", choices=SAMPLERS, default="ddpm")
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=common(), help="IOU / PSNR report on a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sampler", choices=SAMPLERS, default="ddpm")
    p.add_argument("--steps", type=int)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def dispatch(argv: Sequence[str]) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return CommandResult(exit_code=code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return CommandResult(EXIT_USAGE, summary=f"usage error: {exc}")
    except FileNotFoundError as exc:
        return CommandResult(EXIT_MISSING_INPUT, summary=f"missing input: {exc}")
    except TrainingDiverged as exc:
        return CommandResult(EXIT_DIVERGED, summary=f"training diverged: {exc}")
    except (CorpusScanError, SplitError, UnknownLabelError, CheckpointError, SegmentationError, ValueError) as exc:
        return CommandResult(EXIT_BAD_DATA, summary=f"error: {exc}")
    except Exception as exc:
        logging.getLogger(__name__).debug("unhandled error", exc_info=True)
        return CommandResult(EXIT_FAILURE, summary=f"failed: {type(exc).__name__}: {exc}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    torch.set_flush_denormal(True)
    result = dispatch(sys.argv[1:] if argv is None else argv)
    if result.summary:
        stream = sys.stdout if result.exit_code == EXIT_OK else sys.stderr
        print(result.summary, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
