"""Checkpoint -> glyph images."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from calligen.backbone import Denoiser
from calligen.codec import Codec
from calligen.diffusion import NoiseSchedule, SampleRequest, ddim_sample, ddpm_sample
from calligen.labels import LabelTriple

SAMPLERS = ("ddpm", "ddim")


@torch.no_grad()
def sample_latents(
    model: Denoiser,
    labels: Sequence[LabelTriple],
    schedule: NoiseSchedule,
    seed: int = 0,
    sampler: str = "ddpm",
    steps: Optional[int] = None,
    eta: float = 0.0,
    batch_size: int = 256,
) -> torch.Tensor:
    """Latents ``(len(labels), c, b, b)``; chunk ``i`` of the batch is seeded with ``seed + i``."""
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}, got {sampler!r}")
    model.eval()
    shape = model.config.latent_shape
    out = []
    for i, start in enumerate(range(0, len(labels), batch_size)):
        chunk = [LabelTriple(*lab) for lab in labels[start:start + batch_size]]
        request = SampleRequest(labels=chunk, shape=shape, seed=seed + i)
        if sampler == "ddpm":
            out.append(ddpm_sample(model, request, schedule))
        else:
            out.append(ddim_sample(model, request, schedule, num_steps=steps or 50, eta=eta))
    return torch.cat(out)


def latents_to_images(latents: torch.Tensor, codec: Codec) -> np.ndarray:
    """Decode to uint8 grayscale ``(N, side, side)`` (first image channel for RGB codecs)."""
    images = codec.decode(latents.double().numpy())
    gray = images[:, 0] if images.shape[1] == 1 else images.mean(axis=1)
    return np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)


def generate_images(
    model: Denoiser,
    labels: Sequence[LabelTriple],
    schedule: NoiseSchedule,
    codec: Codec,
    seed: int = 0,
    sampler: str = "ddpm",
    steps: Optional[int] = None,
    eta: float = 0.0,
) -> np.ndarray:
    latents = sample_latents(model, labels, schedule, seed, sampler, steps, eta)
    return latents_to_images(latents, codec)
