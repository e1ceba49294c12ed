"""Calligrapher / font / character labels and the name <-> id registry."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Union

REGISTRY_VERSION = 1
SECTIONS = ("calligraphers", "fonts", "characters")


class LabelTriple(NamedTuple):
    calligrapher_id: int
    font_id: int
    character_id: int


class UnknownLabelError(KeyError):
    pass


@dataclass(frozen=True)
class LabelRegistry:
    """Three dense, 0-based, sorted-name vocabularies."""

    calligraphers: tuple[str, ...]
    fonts: tuple[str, ...]
    characters: tuple[str, ...]

    def __post_init__(self) -> None:
        for section in SECTIONS:
            names = getattr(self, section)
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate names in {section}")

    @classmethod
    def from_names(cls, calligraphers: Iterable[str], fonts: Iterable[str], characters: Iterable[str]) -> "LabelRegistry":
        return cls(tuple(sorted(set(calligraphers))), tuple(sorted(set(fonts))), tuple(sorted(set(characters))))

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.calligraphers), len(self.fonts), len(self.characters)

    def _id(self, section: str, name: str) -> int:
        names = getattr(self, section)
        try:
            return names.index(name)
        except ValueError:
            raise UnknownLabelError(f"unknown {section[:-1]} {name!r}") from None

    def encode(self, calligrapher: str, font: str, character: str) -> LabelTriple:
        return LabelTriple(
            self._id("calligraphers", calligrapher),
            self._id("fonts", font),
            self._id("characters", character),
        )

    def decode(self, triple: LabelTriple) -> tuple[str, str, str]:
        out = []
        for section, idx in zip(SECTIONS, triple):
            names = getattr(self, section)
            if not 0 <= idx < len(names):
                raise UnknownLabelError(f"{section[:-1]} id {idx} outside [0, {len(names)})")
            out.append(names[idx])
        return tuple(out)  # type: ignore[return-value]

    def to_dict(self) -> dict:
        doc: dict = {"version": REGISTRY_VERSION}
        for section in SECTIONS:
            doc[section] = {name: i for i, name in enumerate(getattr(self, section))}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "LabelRegistry":
        if doc.get("version") != REGISTRY_VERSION:
            raise ValueError(f"unsupported registry version {doc.get('version')!r}")
        sections = []
        for section in SECTIONS:
            mapping = doc[section]
            ids = sorted(mapping.values())
            if ids != list(range(len(ids))):
                raise ValueError(f"registry section {section!r} ids are not dense 0..n-1")
            sections.append(tuple(sorted(mapping, key=mapping.__getitem__)))
        return cls(*sections)

    def save(self, path: Union[str, Path]) -> None:
        text = json.dumps(self.to_dict(), ensure_ascii=False, indent=2)
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LabelRegistry":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
