"""Label-conditioned calligraphy glyph diffusion with a bidirectional state-space denoiser."""

from calligen.backbone import Denoiser, ModelConfig, build_model
from calligen.codec import CodecSpec
from calligen.diffusion import NoiseSchedule, SampleRequest, make_linear_schedule
from calligen.labels import LabelRegistry, LabelTriple

__all__ = [
    "CodecSpec",
    "Denoiser",
    "LabelRegistry",
    "LabelTriple",
    "ModelConfig",
    "NoiseSchedule",
    "SampleRequest",
    "build_model",
    "make_linear_schedule",
]

__version__ = "0.1.0"
