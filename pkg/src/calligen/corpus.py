"""Corpus layout ``root/<calligrapher>/<font>/<character>/<index>.png``, manifests and splits."""

from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from PIL import Image

from calligen.labels import LabelRegistry

FONTS = ("regular", "running", "cursive", "clerical", "seal", "seal carving")
IMAGE_SUFFIXES = (".png",)
MANIFEST_FIELDS = ("calligrapher", "font", "character", "index", "path")


@dataclass(frozen=True, order=True)
class CorpusRecord:
    calligrapher: str
    font: str
    character: str
    index: int
    path: Path

    @property
    def pair(self) -> tuple[str, str]:
        return (self.calligrapher, self.character)

    @property
    def group(self) -> tuple[str, str, str]:
        return (self.calligrapher, self.font, self.character)


class CorpusScanError(ValueError):
    """Raised with every malformed or unreadable entry found during a scan."""

    def __init__(self, problems: Sequence[str], records: Sequence[CorpusRecord] = ()):
        self.problems = list(problems)
        self.records = list(records)
        listing = "\n  ".join(self.problems)
        super().__init__(f"{len(self.problems)} problem(s) in corpus:\n  {listing}")


class SplitError(ValueError):
    pass


def _visible(entries: Iterable[Path]) -> list[Path]:
    return sorted((p for p in entries if not p.name.startswith(".")), key=lambda p: p.name)


def scan_corpus(root: Union[str, Path], verify: bool = True) -> list[CorpusRecord]:
    """All images under ``root`` in (calligrapher, font, character, index) order.

    Any file at the wrong depth, with a non-numeric or duplicate index, a
    non-image suffix, or (with ``verify``) unreadable content makes the scan
    raise :class:`CorpusScanError` listing every problem. Dotfiles are ignored.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} is not a directory")
    records: list[CorpusRecord] = []
    problems: list[str] = []
    for cal in _visible(root.iterdir()):
        if not cal.is_dir():
            problems.append(f"{cal}: expected a calligrapher directory")
            continue
        for font in _visible(cal.iterdir()):
            if not font.is_dir():
                problems.append(f"{font}: expected a font directory")
                continue
            for char in _visible(font.iterdir()):
                if not char.is_dir():
                    problems.append(f"{char}: expected a character directory")
                    continue
                seen: dict[int, Path] = {}
                for item in _visible(char.iterdir()):
                    if item.is_dir():
                        problems.append(f"{item}: unexpected directory below character level")
                        continue
                    if item.suffix.lower() not in IMAGE_SUFFIXES:
                        problems.append(f"{item}: not a .png image")
                        continue
                    if not item.stem.isdigit():
                        problems.append(f"{item}: image name is not a numeric index")
                        continue
                    index = int(item.stem)
                    if index in seen:
                        problems.append(f"{item}: index {index} duplicates {seen[index].name}")
                        continue
                    if verify:
                        try:
                            with Image.open(item) as im:
                                im.verify()
                        except Exception as exc:
                            problems.append(f"{item}: unreadable ({exc})")
                            continue
                    seen[index] = item
                    records.append(CorpusRecord(cal.name, font.name, char.name, index, item))
    records.sort()
    if problems:
        raise CorpusScanError(problems, records)
    return records


def write_manifest(records: Iterable[CorpusRecord], path: Union[str, Path]) -> None:
    """One JSON object per line; paths are stored relative to the manifest's directory."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for rec in records:
        rel = Path(os.path.relpath(Path(rec.path).resolve(), base)).as_posix()
        row = {"calligrapher": rec.calligrapher, "font": rec.font, "character": rec.character,
               "index": rec.index, "path": rel}
        lines.append(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> list[CorpusRecord]:
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            records.append(CorpusRecord(row["calligrapher"], row["font"], row["character"],
                                        int(row["index"]), base / row["path"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed manifest row ({exc})") from exc
    return records


def build_label_registry(records: Sequence[CorpusRecord]) -> LabelRegistry:
    if not records:
        raise ValueError("cannot build a label registry from an empty record list")
    return LabelRegistry.from_names(
        (r.calligrapher for r in records),
        (r.font for r in records),
        (r.character for r in records),
    )


def corpus_stats(records: Sequence[CorpusRecord]) -> dict:
    """Image counts per calligrapher, font and character."""
    return {
        "images": len(records),
        "calligraphers": dict(sorted(Counter(r.calligrapher for r in records).items())),
        "fonts": dict(sorted(Counter(r.font for r in records).items())),
        "characters": dict(sorted(Counter(r.character for r in records).items())),
    }


def held_out_count(n_characters: int, train_frac: float) -> int:
    # rounding guards against 0.1 * 10 = 0.9999999999999998
    return math.ceil(round((1.0 - train_frac) * n_characters, 9))


def build_experiment_split(
    records: Sequence[CorpusRecord],
    n_calligraphers: int = 40,
    n_characters: int = 40,
    train_frac: float = 0.9,
    max_per_character: int = 4,
    seed: int = 0,
) -> tuple[list[CorpusRecord], list[CorpusRecord]]:
    """Balanced subset with per-calligrapher held-out characters.

    The ``n_calligraphers`` calligraphers with the most distinct characters are
    chosen (ties broken by name) and ``n_characters`` characters they all wrote
    are drawn at random. Each calligrapher holds out
    ``ceil((1 - train_frac) * n_characters)`` of them; every image of a held-out
    (calligrapher, character) pair goes to test. Each (calligrapher, font,
    character) group keeps at most ``max_per_character`` randomly chosen images.
    """
    if not 0.0 <= train_frac <= 1.0:
        raise SplitError(f"train_frac must be in [0, 1], got {train_frac}")
    rng = np.random.default_rng(seed)
    chars_by_cal: dict[str, set[str]] = defaultdict(set)
    for r in records:
        chars_by_cal[r.calligrapher].add(r.character)
    if len(chars_by_cal) < n_calligraphers:
        raise SplitError(f"corpus has {len(chars_by_cal)} calligraphers, {n_calligraphers} required")
    ranked = sorted(chars_by_cal, key=lambda c: (-len(chars_by_cal[c]), c))
    chosen_cals = sorted(ranked[:n_calligraphers])
    shared = sorted(set.intersection(*(chars_by_cal[c] for c in chosen_cals)))
    if len(shared) < n_characters:
        raise SplitError(
            f"the {n_calligraphers} best-covered calligraphers share {len(shared)} characters, "
            f"{n_characters} required"
        )
    chosen_chars = sorted(rng.choice(shared, size=n_characters, replace=False).tolist())

    k = held_out_count(n_characters, train_frac)
    held_out = set()
    for cal in chosen_cals:
        for ch in rng.choice(chosen_chars, size=k, replace=False).tolist():
            held_out.add((cal, ch))

    char_set, cal_set = set(chosen_chars), set(chosen_cals)
    groups: dict[tuple[str, str, str], list[CorpusRecord]] = defaultdict(list)
    for r in sorted(records):
        if r.calligrapher in cal_set and r.character in char_set:
            groups[r.group].append(r)

    train: list[CorpusRecord] = []
    test: list[CorpusRecord] = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) > max_per_character:
            pick = rng.choice(len(members), size=max_per_character, replace=False)
            members = [members[i] for i in sorted(pick)]
        target = test if (key[0], key[2]) in held_out else train
        target.extend(members)
    return train, test
