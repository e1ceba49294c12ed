"""Conditional epsilon-prediction training loop and checkpoints.

A checkpoint is a directory:

    config.json          format version, step, full training config (human readable)
    weights.safetensors  model tensors by name (plus ``ema.``-prefixed copies)
    trainer_state.pt     optimizer moments and the data/noise generator state
    registry.json        label registry the model was trained with
"""

from __future__ import annotations

import copy
import json
import logging
import math
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image
from safetensors.torch import load_file, save_file

from calligen.backbone import Denoiser, ModelConfig, build_model
from calligen.codec import Codec, CodecSpec
from calligen.corpus import CorpusRecord, read_manifest
from calligen.diffusion import NoiseSchedule, make_linear_schedule, q_sample, training_loss
from calligen.labels import LabelRegistry

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass
class TrainConfig:
    model: ModelConfig
    manifest: str = ""
    codec: CodecSpec = field(default_factory=CodecSpec)
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_steps: int = 20000
    seed: int = 0
    checkpoint_every: int = 1000
    ema_decay: Optional[float] = None
    compile: bool = False
    num_threads: int = 1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.codec.latent_shape != self.model.latent_shape:
            raise ValueError(f"codec latent shape {self.codec.latent_shape} != model latent shape {self.model.latent_shape}")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["model"] = ModelConfig(**doc["model"])
        doc["codec"] = CodecSpec(**doc.get("codec", {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**doc)


def load_image(path: PathLike, spec: CodecSpec) -> np.ndarray:
    """Image file -> float array ``(channels, side, side)`` in [0, 1]; box-resampled if needed."""
    mode = "L" if spec.image_channels == 1 else "RGB"
    with Image.open(path) as im:
        im = im.convert(mode)
        if im.size != (spec.image_side, spec.image_side):
            im = im.resize((spec.image_side, spec.image_side), Image.BOX)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def load_training_data(
    records: list[CorpusRecord], registry: LabelRegistry, codec: Codec
) -> tuple[torch.Tensor, torch.Tensor]:
    """Encoded latents ``(N, c, b, b)`` and label ids ``(N, 3)``."""
    if not records:
        raise ValueError("no training records")
    images = np.stack([load_image(r.path, codec.spec) for r in records])
    latents = torch.from_numpy(codec.encode(images)).to(torch.float32)
    labels = torch.tensor([tuple(registry.encode(r.calligrapher, r.font, r.character)) for r in records])
    return latents, labels


def sample_timesteps(batch: int, T: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, T, (batch,), generator=generator)


class Trainer:
    """Owns model, optimizer, EMA copy and the single generator driving batches, t and noise."""

    def __init__(self, config: TrainConfig, latents: torch.Tensor, labels: torch.Tensor, registry: LabelRegistry):
        self.config = config
        self.registry = registry
        if registry.sizes != (config.model.num_calligraphers, config.model.num_fonts, config.model.num_characters):
            raise ValueError(f"registry sizes {registry.sizes} do not match the model vocabulary")
        self.latents = latents
        self.labels = labels
        self.schedule = config.schedule()
        self.model = build_model(config.model, seed=config.seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.ema = copy.deepcopy(self.model).requires_grad_(False) if config.ema_decay is not None else None
        self.step = 0
        self._forward = torch.compile(self.model) if config.compile else self.model

    def train_step(self) -> float:
        cfg = self.config
        gen = self.generator
        idx = torch.randint(0, self.latents.shape[0], (cfg.batch_size,), generator=gen)
        x0 = self.latents[idx]
        labels = self.labels[idx]
        t = sample_timesteps(cfg.batch_size, self.schedule.T, gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, t, eps, self.schedule)
        loss = training_loss(self._forward(x_t, t, labels), eps)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(self.step + 1, value)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if self.ema is not None:
            decay = cfg.ema_decay
            with torch.no_grad():
                for e, p in zip(self.ema.parameters(), self.model.parameters()):
                    e.mul_(decay).add_(p, alpha=1.0 - decay)
        self.step += 1
        return value

    def sampling_model(self) -> Denoiser:
        return self.ema if self.ema is not None else self.model

    def run(
        self,
        until_step: Optional[int] = None,
        out_dir: Optional[PathLike] = None,
        log_path: Optional[PathLike] = None,
    ) -> list[float]:
        """Train up to ``until_step`` (default ``max_steps``); returns the losses of this call."""
        cfg = self.config
        until = cfg.max_steps if until_step is None else until_step
        losses: list[float] = []
        log = open(log_path, "w", encoding="utf-8") if log_path else None
        start = time.perf_counter()
        try:
            while self.step < until:
                try:
                    loss = self.train_step()
                except TrainingDiverged as exc:
                    if log:
                        log.write(json.dumps({"step": exc.step, "loss": None, "error": str(exc)}) + "\n")
                    raise
                losses.append(loss)
                if log:
                    log.write(json.dumps({"step": self.step, "loss": loss,
                                          "wall_time": round(time.perf_counter() - start, 3)}) + "\n")
                if self.step % 500 == 0:
                    logger.info("step %d loss %.4f", self.step, float(np.mean(losses[-500:])))
                if out_dir and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(Path(out_dir) / f"step_{self.step:07d}")
        finally:
            if log:
                log.close()
        return losses

    # -- persistence -------------------------------------------------------

    def save(self, path: PathLike) -> Path:
        tensors = {k: v.detach().clone().contiguous() for k, v in self.model.state_dict().items()}
        if self.ema is not None:
            tensors.update({f"ema.{k}": v.detach().clone().contiguous() for k, v in self.ema.state_dict().items()})
        state = {"optimizer": self.optimizer.state_dict(), "generator": self.generator.get_state()}
        return save_checkpoint(tensors, self.config, self.step, path, self.registry, state)

    @classmethod
    def resume(cls, path: PathLike, latents: torch.Tensor, labels: torch.Tensor) -> "Trainer":
        ckpt = load_checkpoint(path)
        trainer = cls(ckpt.config, latents, labels, ckpt.registry)
        trainer.model.load_state_dict(ckpt.model.state_dict())
        if trainer.ema is not None:
            trainer.ema.load_state_dict(ckpt.sampling_model.state_dict())
        if ckpt.trainer_state is None:
            raise CheckpointError(f"{path}: trainer_state.pt missing, cannot resume")
        trainer.optimizer.load_state_dict(ckpt.trainer_state["optimizer"])
        trainer.generator.set_state(ckpt.trainer_state["generator"])
        trainer.step = ckpt.step
        return trainer


@dataclass
class Checkpoint:
    model: Denoiser
    config: TrainConfig
    step: int
    registry: LabelRegistry
    ema: Optional[Denoiser] = None
    trainer_state: Optional[dict] = None

    @property
    def sampling_model(self) -> Denoiser:
        return self.ema if self.ema is not None else self.model


def save_checkpoint(
    tensors: dict[str, torch.Tensor],
    config: TrainConfig,
    step: int,
    path: PathLike,
    registry: LabelRegistry,
    trainer_state: Optional[dict] = None,
) -> Path:
    """Write a checkpoint directory atomically (built beside ``path``, then renamed over it)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "step": int(step),
            "config": config.to_dict(),
            "tensors": {k: list(v.shape) for k, v in sorted(tensors.items())},
        }
        (tmp / "config.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        save_file(tensors, str(tmp / "weights.safetensors"))
        registry.save(tmp / "registry.json")
        if trainer_state is not None:
            torch.save(trainer_state, tmp / "trainer_state.pt")
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _load_into(model: Denoiser, tensors: dict[str, torch.Tensor], prefix: str, path: Path) -> None:
    expected = model.state_dict()
    for name, ref in expected.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"{path}: tensor {key!r} missing")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"{path}: tensor {key!r} has shape {tuple(tensors[key].shape)}, model expects {tuple(ref.shape)}"
            )
    model.load_state_dict({name: tensors[prefix + name] for name in expected})


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "config.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: config.json not found") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: config.json is not valid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format_version {version!r} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        config = TrainConfig.from_dict(manifest["config"])
        step = int(manifest["step"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config field ({exc})") from exc
    try:
        tensors = load_file(str(path / "weights.safetensors"))
    except Exception as exc:
        raise CheckpointError(f"{path}: weights.safetensors unreadable ({exc})") from exc
    try:
        registry = LabelRegistry.load(path / "registry.json")
    except Exception as exc:
        raise CheckpointError(f"{path}: registry.json unreadable ({exc})") from exc
    state = None
    if (path / "trainer_state.pt").exists():
        try:
            state = torch.load(path / "trainer_state.pt", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"{path}: trainer_state.pt unreadable ({exc})") from exc

    model = build_model(config.model, seed=config.seed)
    _load_into(model, tensors, "", path)
    ema = None
    if config.ema_decay is not None:
        ema = copy.deepcopy(model)
        _load_into(ema, tensors, "ema.", path)
    return Checkpoint(model=model.eval(), config=config, step=step, registry=registry,
                      ema=ema.eval() if ema is not None else None, trainer_state=state)


def train(
    config: TrainConfig,
    out_dir: PathLike,
    registry: Optional[LabelRegistry] = None,
    records: Optional[list[CorpusRecord]] = None,
) -> Path:
    """Train from the manifest in ``config`` and write ``out_dir/final`` plus periodic checkpoints.

    The registry defaults to ``registry.json`` next to the manifest.
    """
    torch.set_num_threads(config.num_threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if records is None:
        records = read_manifest(config.manifest)
    if registry is None:
        registry = LabelRegistry.load(Path(config.manifest).parent / "registry.json")
    latents, labels = load_training_data(records, registry, Codec(config.codec))
    trainer = Trainer(config, latents, labels, registry)
    trainer.run(out_dir=out_dir, log_path=out_dir / "train_log.jsonl")
    return trainer.save(out_dir / "final")
