"""IOU / PSNR / OCR-recognition metrics and per-font reports."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from calligen.binarize import INK, PAPER, otsu_threshold
from calligen.codec import Codec
from calligen.corpus import CorpusRecord
from calligen.sampling import generate_images

TABLE_FONTS = ("regular", "running", "cursive", "clerical", "seal")


def _same_shape(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of the ink (black) pixel sets; 1.0 when both are empty."""
    a, b = _same_shape(a, b)
    ink_a, ink_b = a < 128, b < 128
    union = np.count_nonzero(ink_a | ink_b)
    if union == 0:
        return 1.0
    return np.count_nonzero(ink_a & ink_b) / union


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _same_shape(a, b)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def rebinarize(image: np.ndarray) -> np.ndarray:
    """Otsu ink -> 0, everything else -> 255 (constant images become blank paper)."""
    _, ink = otsu_threshold(image)
    return np.where(ink, INK, PAPER).astype(np.uint8)


# ---------------------------------------------------------------------------
# OCR harness


class OcrClient(Protocol):
    def recognize(self, image: np.ndarray) -> tuple[str, float]: ...


class ScriptedOcrClient:
    """Mock client replaying a fixed list of answers (or computing them with a function)."""

    def __init__(self, answers: Union[Sequence[str], Callable[[np.ndarray], str]], confidence: float = 1.0):
        self._answers = answers
        self._i = 0
        self.confidence = confidence

    def recognize(self, image: np.ndarray) -> tuple[str, float]:
        if callable(self._answers):
            return self._answers(image), self.confidence
        answer = self._answers[self._i]
        self._i += 1
        return answer, self.confidence


@dataclass
class SampleResult:
    font: str
    character: str
    recognized: Optional[str] = None
    ocr_error: Optional[str] = None
    iou: Optional[float] = None
    psnr: Optional[float] = None

    @property
    def passed(self) -> bool:
        return self.ocr_error is None and self.recognized == self.character


@dataclass
class MetricsRow:
    font: str
    count: int
    ocr_accuracy: Optional[float] = None
    ocr_errors: int = 0
    mean_iou: Optional[float] = None
    mean_psnr: Optional[float] = None


def _font_order(fonts: Iterable[str]) -> list[str]:
    fonts = set(fonts)
    known = [f for f in TABLE_FONTS if f in fonts]
    return known + sorted(fonts - set(known))


def _mean(values: list[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _row(font: str, results: list[SampleResult]) -> MetricsRow:
    row = MetricsRow(font=font, count=len(results))
    ocr = [r for r in results if r.recognized is not None or r.ocr_error is not None]
    if ocr:
        row.ocr_errors = sum(r.ocr_error is not None for r in ocr)
        row.ocr_accuracy = sum(r.passed for r in ocr) / len(ocr)
    row.mean_iou = _mean([r.iou for r in results if r.iou is not None])
    row.mean_psnr = _mean([r.psnr for r in results if r.psnr is not None])
    return row


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    samples: list[SampleResult] = field(default_factory=list)

    @classmethod
    def from_results(cls, results: list[SampleResult]) -> "MetricsReport":
        by_font: dict[str, list[SampleResult]] = defaultdict(list)
        for r in results:
            by_font[r.font].append(r)
        rows = [_row(font, by_font[font]) for font in _font_order(by_font)]
        rows.append(_row("all", list(results)))
        return cls(rows=rows, samples=list(results))

    def row(self, font: str) -> MetricsRow:
        for r in self.rows:
            if r.font == font:
                return r
        raise KeyError(font)

    def to_table(self) -> str:
        def fmt(v: Optional[float], digits: int) -> str:
            if v is None:
                return "-"
            if math.isinf(v):
                return "inf"
            return f"{v:.{digits}f}"

        header = f"{'font':<14}{'count':>7}{'ocr_acc':>9}{'ocr_err':>9}{'iou':>8}{'psnr':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.font:<14}{r.count:>7}{fmt(r.ocr_accuracy, 3):>9}{r.ocr_errors:>9}"
                f"{fmt(r.mean_iou, 3):>8}{fmt(r.mean_psnr, 4):>10}"
            )
        lines.append("(iou and psnr: higher is better)")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        def clean(d: dict) -> dict:
            return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

        return "".join(json.dumps(clean(asdict(r)), ensure_ascii=False) + "\n" for r in self.rows)

    def write(self, out_dir: Union[str, Path]) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table, jsonl = out_dir / "metrics.txt", out_dir / "metrics.jsonl"
        table.write_text(self.to_table() + "\n", encoding="utf-8")
        jsonl.write_text(self.to_jsonl(), encoding="utf-8")
        return [table, jsonl]


def recognize_all(
    samples: Sequence[tuple[np.ndarray, str, str]], client: OcrClient
) -> list[SampleResult]:
    results = []
    for image, character, font in samples:
        res = SampleResult(font=font, character=character)
        try:
            res.recognized, _ = client.recognize(image)
        except Exception as exc:
            res.ocr_error = f"{type(exc).__name__}: {exc}"
        results.append(res)
    return results


def ocr_accuracy(samples: Sequence[tuple[np.ndarray, str, str]], client: OcrClient) -> MetricsReport:
    """Per-font pass rate of ``client`` on ``(image, expected character, font)`` samples.

    Client exceptions count as failures and are tallied in ``ocr_errors``.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    return MetricsReport.from_results(recognize_all(samples, client))


def evaluate_pairs(
    generated: Sequence[np.ndarray],
    references: Sequence[np.ndarray],
    fonts: Sequence[str],
    characters: Sequence[str],
    ocr_client: Optional[OcrClient] = None,
) -> MetricsReport:
    """Compare generated glyphs with ground truth after re-binarizing both."""
    if not (len(generated) == len(references) == len(fonts) == len(characters)):
        raise ValueError("generated, references, fonts and characters must have equal length")
    results = []
    for gen, ref, font, char in zip(generated, references, fonts, characters):
        ref = np.asarray(ref)
        gen = np.asarray(gen)
        if gen.shape != ref.shape:
            gen = np.asarray(Image.fromarray(gen).resize(ref.shape[::-1], Image.NEAREST))
        gen_bin, ref_bin = rebinarize(gen), np.where(ref < 128, INK, PAPER).astype(np.uint8)
        res = SampleResult(font=font, character=char, iou=iou(gen_bin, ref_bin), psnr=psnr(gen_bin, ref_bin))
        if ocr_client is not None:
            (ocr_res,) = recognize_all([(gen_bin, char, font)], ocr_client)
            res.recognized, res.ocr_error = ocr_res.recognized, ocr_res.ocr_error
        results.append(res)
    return MetricsReport.from_results(results)


def evaluate_split(
    checkpoint,
    test_records: Sequence[CorpusRecord],
    ocr_client: Optional[OcrClient] = None,
    seed: int = 0,
    sampler: str = "ddpm",
    steps: Optional[int] = None,
) -> MetricsReport:
    """Sample one glyph per test record from its label triple and score it against the record's image."""
    missing = [str(r.path) for r in test_records if not Path(r.path).exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} ground-truth image(s) missing: {missing[:5]}")
    registry = checkpoint.registry
    config = checkpoint.config
    labels = [registry.encode(r.calligrapher, r.font, r.character) for r in test_records]
    generated = generate_images(checkpoint.sampling_model, labels, config.schedule(), Codec(config.codec),
                                seed=seed, sampler=sampler, steps=steps)
    references = []
    for r in test_records:
        with Image.open(r.path) as im:
            references.append(np.asarray(im.convert("L")))
    return evaluate_pairs(generated, references, [r.font for r in test_records],
                          [r.character for r in test_records], ocr_client)


# ---------------------------------------------------------------------------
# nearest-centroid glyph classifier


def _features(images: np.ndarray, blur: float) -> np.ndarray:
    x = 1.0 - np.asarray(images, dtype=np.float64) / 255.0  # ink = 1
    if blur > 0:
        x = ndimage.gaussian_filter(x, sigma=(0, blur, blur))
    return x.reshape(len(x), -1)


class CentroidClassifier:
    """Nearest class mean in (lightly blurred) pixel space.

    ``predict(images, candidates)`` optionally restricts each image to a list of
    candidate classes.
    """

    def __init__(self, images: np.ndarray, classes: Sequence, blur: float = 1.0):
        self.blur = blur
        feats = _features(images, blur)
        groups: dict = defaultdict(list)
        for f, c in zip(feats, classes):
            groups[c].append(f)
        self.classes = sorted(groups)
        self.centroids = np.stack([np.mean(groups[c], axis=0) for c in self.classes])
        self._index = {c: i for i, c in enumerate(self.classes)}

    def distances(self, images: np.ndarray) -> np.ndarray:
        feats = _features(images, self.blur)
        return ((feats[:, None, :] - self.centroids[None]) ** 2).sum(-1)

    def predict(self, images: np.ndarray, candidates: Optional[Sequence[Sequence]] = None) -> list:
        dist = self.distances(images)
        out = []
        for i, row in enumerate(dist):
            if candidates is None:
                out.append(self.classes[int(row.argmin())])
            else:
                cands = list(candidates[i])
                out.append(cands[int(np.argmin([row[self._index[c]] for c in cands]))])
        return out
