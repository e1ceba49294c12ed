"""Procedural toy calligraphy corpus.

Characters are stroke skeletons in the unit square (x right, y down). A
calligrapher style fixes stroke width, slant and size; a font applies a
further affine distortion; every image adds small random jitter. Glyphs are
rasterized by thresholding the distance to the nearest stroke.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from calligen.corpus import CorpusRecord

Segment = tuple[float, float, float, float]

CHARACTERS: dict[str, tuple[Segment, ...]] = {
    "yi": ((0.12, 0.5, 0.88, 0.5),),
    "er": ((0.25, 0.3, 0.75, 0.3), (0.12, 0.72, 0.88, 0.72)),
    "san": ((0.25, 0.2, 0.75, 0.2), (0.3, 0.5, 0.7, 0.5), (0.12, 0.8, 0.88, 0.8)),
    "shi": ((0.12, 0.42, 0.88, 0.42), (0.5, 0.1, 0.5, 0.9)),
    "kou": ((0.22, 0.25, 0.78, 0.25), (0.22, 0.25, 0.22, 0.78), (0.78, 0.25, 0.78, 0.78), (0.22, 0.78, 0.78, 0.78)),
    "ren": ((0.5, 0.1, 0.15, 0.88), (0.46, 0.32, 0.85, 0.88)),
    "da": ((0.12, 0.38, 0.88, 0.38), (0.5, 0.1, 0.15, 0.88), (0.5, 0.38, 0.85, 0.88)),
    "wang": ((0.2, 0.18, 0.8, 0.18), (0.25, 0.5, 0.75, 0.5), (0.12, 0.84, 0.88, 0.84), (0.5, 0.18, 0.5, 0.84)),
    "gong": ((0.22, 0.2, 0.78, 0.2), (0.5, 0.2, 0.5, 0.8), (0.12, 0.8, 0.88, 0.8)),
    "tian": ((0.18, 0.18, 0.82, 0.18), (0.18, 0.18, 0.18, 0.82), (0.82, 0.18, 0.82, 0.82),
             (0.18, 0.82, 0.82, 0.82), (0.18, 0.5, 0.82, 0.5), (0.5, 0.18, 0.5, 0.82)),
}


@dataclass(frozen=True)
class Style:
    width: float  # stroke width as a fraction of the glyph side
    shear: float  # x += shear * (y - 0.5)
    scale_x: float = 1.0
    scale_y: float = 1.0
    rotation: float = 0.0  # degrees


CALLIGRAPHERS: dict[str, Style] = {
    "chen": Style(width=0.045, shear=0.0, scale_x=0.95, scale_y=0.95),
    "li": Style(width=0.11, shear=0.0, scale_x=0.95, scale_y=0.95),
    "wang": Style(width=0.07, shear=0.4, scale_x=0.85, scale_y=0.95),
    "zhao": Style(width=0.07, shear=-0.3, scale_x=0.7, scale_y=0.7),
}

FONT_STYLES: dict[str, Style] = {
    "regular": Style(width=0.0, shear=0.0),
    "running": Style(width=0.0, shear=0.0, rotation=-10.0),
    "clerical": Style(width=0.0, shear=0.0, scale_x=1.12, scale_y=0.8),
}


def _transform(points: np.ndarray, style: Style) -> np.ndarray:
    x, y = points[..., 0] - 0.5, points[..., 1] - 0.5
    x = x + style.shear * y
    x, y = x * style.scale_x, y * style.scale_y
    if style.rotation:
        th = np.deg2rad(style.rotation)
        x, y = np.cos(th) * x - np.sin(th) * y, np.sin(th) * x + np.cos(th) * y
    return np.stack([x + 0.5, y + 0.5], axis=-1)


def _segment_distance(px: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Distance from each point ``(m, 2)`` to the nearest of ``(k, 2, 2)`` segments."""
    a, b = segments[:, 0], segments[:, 1]
    ab = b - a
    ap = px[:, None, :] - a[None]
    denom = np.maximum((ab**2).sum(-1), 1e-12)
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.sqrt(((px[:, None, :] - closest) ** 2).sum(-1)).min(axis=1)


def render_strokes(
    segments: np.ndarray, width: float, height: int, width_px: int, offset: tuple[float, float] = (0.0, 0.0)
) -> np.ndarray:
    """Boolean ink mask; segment coordinates are fractions of the image box."""
    ys, xs = np.mgrid[0:height, 0:width_px]
    px = np.stack([(xs.ravel() + 0.5) / width_px, (ys.ravel() + 0.5) / height], axis=1)
    px = px - np.array(offset)
    dist = _segment_distance(px, segments)
    return (dist <= width / 2).reshape(height, width_px)


def render_glyph(
    character: str, calligrapher: str, font: str, rng: np.random.Generator, side: int = 32
) -> np.ndarray:
    """One ``side x side`` uint8 glyph, ink 0 on paper 255."""
    strokes = np.array(CHARACTERS[character], dtype=np.float64).reshape(-1, 2, 2)
    strokes = strokes + rng.uniform(-0.02, 0.02, size=strokes.shape)
    style = CALLIGRAPHERS[calligrapher]
    jitter = Style(width=0.0, shear=rng.uniform(-0.04, 0.04), rotation=rng.uniform(-3.0, 3.0))
    pts = _transform(_transform(_transform(strokes, style), FONT_STYLES[font]), jitter)
    width = style.width * rng.uniform(0.9, 1.1)
    offset = tuple(rng.uniform(-1.0, 1.0, size=2) / side)
    ink = render_strokes(pts, max(width, 1.0 / side), side, side, offset)
    return np.where(ink, 0, 255).astype(np.uint8)


def glyph_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def synth_corpus(
    root: Union[str, Path],
    per_triple: int = 40,
    seed: int = 0,
    side: int = 32,
    calligraphers: tuple[str, ...] = tuple(CALLIGRAPHERS),
    fonts: tuple[str, ...] = tuple(FONT_STYLES),
    characters: tuple[str, ...] = tuple(CHARACTERS),
) -> list[CorpusRecord]:
    """Write ``root/<calligrapher>/<font>/<character>/<NN>.png`` and return the records."""
    root = Path(root)
    records = []
    width = max(2, len(str(per_triple - 1)))
    for ci, cal in enumerate(calligraphers):
        for fi, font in enumerate(fonts):
            for hi, char in enumerate(characters):
                folder = root / cal / font / char
                folder.mkdir(parents=True, exist_ok=True)
                for idx in range(per_triple):
                    img = render_glyph(char, cal, font, glyph_rng(seed, ci, fi, hi, idx), side)
                    path = folder / f"{idx:0{width}d}.png"
                    Image.fromarray(img, mode="L").save(path)
                    records.append(CorpusRecord(cal, font, char, idx, path))
    return sorted(records)


def render_noisy_photo(
    rng: np.random.Generator,
    height: int,
    width: int,
    character: str = "tian",
    stroke: float = 0.06,
) -> np.ndarray:
    """Gray "photograph" of a glyph stretched over ``height x width``: uneven paper, noisy ink."""
    strokes = np.array(CHARACTERS[character], dtype=np.float64).reshape(-1, 2, 2)
    strokes = strokes + rng.uniform(-0.01, 0.01, size=strokes.shape)
    ink = render_strokes(strokes, stroke, height, width)
    ys, xs = np.mgrid[0:height, 0:width]
    paper = 205 + 25 * (xs / max(width - 1, 1)) - 15 * (ys / max(height - 1, 1))
    img = np.where(ink, rng.uniform(25, 60), paper)
    img = img + rng.normal(0.0, 8.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
