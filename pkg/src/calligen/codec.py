"""Image <-> latent mappings standing in for a pretrained VAE.

Images are float arrays in [0, 1] shaped ``(..., channels, side, side)``;
latents are ``(..., c, b, b)`` in [-1, 1] for the built-in kinds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

KINDS = ("identity", "pooled", "external")


@dataclass(frozen=True)
class CodecSpec:
    image_side: int = 32
    image_channels: int = 1
    latent_side: int = 32
    latent_channels: int = 1
    kind: str = "identity"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"codec kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("image_side", "image_channels", "latent_side", "latent_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"CodecSpec.{name} must be positive")
        if self.kind == "identity" and (
            self.image_side != self.latent_side or self.image_channels != self.latent_channels
        ):
            raise ValueError("identity codec needs equal image/latent side and channels")
        if self.kind == "pooled" and self.image_side % self.latent_side:
            raise ValueError(f"pooled codec needs image_side {self.image_side} divisible by latent_side {self.latent_side}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_channels, self.image_side, self.image_side)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_side, self.latent_side)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shape(x: np.ndarray, expected: tuple[int, int, int], what: str) -> None:
    if x.ndim < 3 or tuple(x.shape[-3:]) != expected:
        raise ValueError(f"{what} shape {tuple(x.shape)} does not end with {expected}")


def _match_channels(x: np.ndarray, channels: int) -> np.ndarray:
    have = x.shape[-3]
    if have == channels:
        return x
    if have > channels:
        return x[..., :channels, :, :]
    reps = -(-channels // have)
    return np.concatenate([x] * reps, axis=-3)[..., :channels, :, :]


def encode(image: np.ndarray, spec: CodecSpec) -> np.ndarray:
    if spec.kind == "external":
        raise ValueError("external codecs are used through ExternalCodec")
    image = np.asarray(image, dtype=np.float64)
    _check_shape(image, spec.image_shape, "image")
    if spec.kind == "pooled":
        f = spec.image_side // spec.latent_side
        *lead, ch, a, _ = image.shape
        image = image.reshape(*lead, ch, a // f, f, a // f, f).mean(axis=(-3, -1))
    image = _match_channels(image, spec.latent_channels)
    return image * 2.0 - 1.0


def decode(latent: np.ndarray, spec: CodecSpec) -> np.ndarray:
    if spec.kind == "external":
        raise ValueError("external codecs are used through ExternalCodec")
    latent = np.asarray(latent, dtype=np.float64)
    _check_shape(latent, spec.latent_shape, "latent")
    image = (latent + 1.0) / 2.0
    if spec.kind == "pooled":
        f = spec.image_side // spec.latent_side
        image = image.repeat(f, axis=-2).repeat(f, axis=-1)
    image = _match_channels(image, spec.image_channels)
    return np.clip(image, 0.0, 1.0)


class ExternalCodec:
    """Adapter for a user-supplied encoder/decoder pair.

    Registration runs one encode/decode on a mid-gray image and checks that the
    shapes match ``spec``.
    """

    def __init__(
        self,
        spec: CodecSpec,
        encode_fn: Callable[[np.ndarray], np.ndarray],
        decode_fn: Callable[[np.ndarray], np.ndarray],
    ):
        self.spec = spec
        self._encode = encode_fn
        self._decode = decode_fn
        probe = np.full((1, *spec.image_shape), 0.5)
        z = np.asarray(encode_fn(probe))
        if tuple(z.shape) != (1, *spec.latent_shape):
            raise ValueError(f"external encoder returned {tuple(z.shape)}, expected {(1, *spec.latent_shape)}")
        back = np.asarray(decode_fn(z))
        if tuple(back.shape) != (1, *spec.image_shape):
            raise ValueError(f"external decoder returned {tuple(back.shape)}, expected {(1, *spec.image_shape)}")

    def encode(self, image: np.ndarray) -> np.ndarray:
        _check_shape(np.asarray(image), self.spec.image_shape, "image")
        return np.asarray(self._encode(image))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        _check_shape(np.asarray(latent), self.spec.latent_shape, "latent")
        return np.asarray(self._decode(latent))


class Codec:
    """Uniform front for built-in and external codecs."""

    def __init__(self, spec: CodecSpec, external: Optional[ExternalCodec] = None):
        if spec.kind == "external" and external is None:
            raise ValueError("external codec spec needs an ExternalCodec instance")
        self.spec = spec
        self.external = external

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self.external.encode(image) if self.external else encode(image, self.spec)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self.external.decode(latent) if self.external else decode(latent, self.spec)
