import json
import os
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from calligen.corpus import (
    CorpusRecord,
    CorpusScanError,
    SplitError,
    build_experiment_split,
    build_label_registry,
    corpus_stats,
    held_out_count,
    read_manifest,
    scan_corpus,
    write_manifest,
)
from calligen.labels import LabelRegistry, LabelTriple, UnknownLabelError


def put_png(path: Path, value: int = 0) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((4, 4), value, np.uint8)).save(path)
    return path


def fake_records(n_cal, n_char, fonts=("regular",), per_group=1):
    return [
        CorpusRecord(f"c{ci}", font, f"k{ki:02d}", idx, Path(f"c{ci}/{font}/k{ki:02d}/{idx}.png"))
        for ci in range(n_cal)
        for font in fonts
        for ki in range(n_char)
        for idx in range(per_group)
    ]


# -- scanning -----------------------------------------------------------------


def test_empty_root(tmp_path):
    assert scan_corpus(tmp_path) == []


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_corpus(tmp_path / "nope")


def test_folder_tree_with_multi_image_character(tmp_path):
    for name in ("Zu/01.png", "Zi/01.png", "Bai/01.png", "Bai/02.png", "Bai/10.png"):
        put_png(tmp_path / "Wang Xizhi" / "running" / name)
    records = scan_corpus(tmp_path)
    assert [(r.character, r.index) for r in records] == [
        ("Bai", 1), ("Bai", 2), ("Bai", 10), ("Zi", 1), ("Zu", 1),
    ]
    assert Counter(r.character for r in records)["Bai"] == 3
    assert scan_corpus(tmp_path) == records


def test_scan_reports_every_problem(tmp_path):
    root = tmp_path
    put_png(root / "a" / "regular" / "x" / "1.png")
    (root / "stray.txt").write_text("hi")
    (root / "a" / "regular" / "x" / "notes.txt").write_text("hi")
    put_png(root / "a" / "regular" / "x" / "abc.png")
    (root / "a" / "regular" / "y").mkdir(parents=True)
    (root / "a" / "regular" / "y" / "2.png").write_bytes(b"not a png")
    put_png(root / "a" / "regular" / "y" / "01.png")
    put_png(root / "a" / "regular" / "y" / "1.png")
    (root / ".cache").mkdir()
    with pytest.raises(CorpusScanError) as info:
        scan_corpus(root)
    problems = "\n".join(info.value.problems)
    assert len(info.value.problems) == 5
    for needle in ("stray.txt", "notes.txt", "abc.png", "2.png", "duplicates"):
        assert needle in problems
    assert len(info.value.records) == 2


def test_manifest_roundtrip_relative_paths(tmp_path):
    put_png(tmp_path / "corpus" / "a" / "seal" / "k" / "3.png")
    records = scan_corpus(tmp_path / "corpus")
    manifest = tmp_path / "data" / "all.jsonl"
    write_manifest(records, manifest)
    row = json.loads(manifest.read_text().splitlines()[0])
    assert row["path"] == "../corpus/a/seal/k/3.png"
    back = read_manifest(manifest)
    assert [(r.group, r.index) for r in back] == [(r.group, r.index) for r in records]
    assert os.path.samefile(back[0].path, records[0].path)


def test_manifest_bad_row(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"calligrapher": "a"}\n')
    with pytest.raises(ValueError, match="m.jsonl:1"):
        read_manifest(path)


def test_stats():
    stats = corpus_stats(fake_records(2, 3, fonts=("regular", "seal"), per_group=2))
    assert stats["images"] == 24
    assert stats["calligraphers"] == {"c0": 12, "c1": 12}
    assert stats["fonts"] == {"regular": 12, "seal": 12}


# -- label registry -----------------------------------------------------------


def test_registry_sizes_and_ids():
    recs = [
        CorpusRecord("b", "regular", "z", 0, Path("x")),
        CorpusRecord("a", "regular", "y", 0, Path("x")),
        CorpusRecord("a", "regular", "x", 0, Path("x")),
    ]
    reg = build_label_registry(recs)
    assert reg.sizes == (2, 1, 3)
    assert reg.encode("b", "regular", "x") == LabelTriple(1, 0, 0)
    assert reg.decode(LabelTriple(0, 0, 2)) == ("a", "regular", "z")
    with pytest.raises(UnknownLabelError):
        reg.encode("c", "regular", "x")
    with pytest.raises(UnknownLabelError):
        reg.decode(LabelTriple(0, 1, 0))
    with pytest.raises(ValueError):
        build_label_registry([])


def test_registry_roundtrip(tmp_path):
    reg = LabelRegistry.from_names(["wang", "anonymous", "li"], ["seal", "regular"], ["永", "一"])
    reg.save(tmp_path / "r.json")
    assert LabelRegistry.load(tmp_path / "r.json") == reg
    assert LabelRegistry.from_dict(json.loads(json.dumps(reg.to_dict()))) == reg


def test_registry_rejects_bad_documents():
    doc = LabelRegistry.from_names(["a"], ["b"], ["c", "d"]).to_dict()
    with pytest.raises(ValueError, match="version"):
        LabelRegistry.from_dict({**doc, "version": 99})
    with pytest.raises(ValueError, match="dense"):
        LabelRegistry.from_dict({**doc, "characters": {"c": 0, "d": 2}})


def test_registry_rebuild_with_new_calligrapher_keeps_sorted_order():
    old = LabelRegistry.from_names(["b", "d"], ["f"], ["k"])
    new = LabelRegistry.from_names(["b", "d", "c"], ["f"], ["k"])
    assert new.calligraphers == ("b", "c", "d")
    old_ids = [new.encode(n, "f", "k").calligrapher_id for n in old.calligraphers]
    assert old_ids == sorted(old_ids)


# -- experiment split ---------------------------------------------------------


def test_held_out_count():
    assert held_out_count(10, 0.9) == 1
    assert held_out_count(40, 0.9) == 4
    assert held_out_count(10, 1.0) == 0
    assert held_out_count(10, 0.85) == 2


def test_five_by_ten_split():
    records = fake_records(5, 10, fonts=("regular", "seal"), per_group=6)
    train, test = build_experiment_split(records, n_calligraphers=5, n_characters=10, seed=0)
    held = defaultdict(set)
    for r in test:
        held[r.calligrapher].add(r.character)
    assert len(held) == 5 and all(len(v) == 1 for v in held.values())
    assert len({r.pair for r in test}) == 5
    assert len({r.group for r in test}) == 10
    assert len(test) == 5 * 2 * 4 and len(train) == 5 * 9 * 2 * 4


@pytest.mark.parametrize("seed", range(20))
def test_split_disjoint_and_capped(seed):
    rng = np.random.default_rng(seed)
    records = [
        r for r in fake_records(7, 14, fonts=("regular", "running"), per_group=5)
        if rng.random() > 0.1
    ]
    # 5 best-covered calligraphers must share at least 8 characters; keep the corpus dense enough
    train, test = build_experiment_split(records, n_calligraphers=5, n_characters=8, train_frac=0.75,
                                         max_per_character=3, seed=seed)
    assert not {r.pair for r in train} & {r.pair for r in test}
    for part in (train, test):
        assert max(Counter(r.group for r in part).values()) <= 3
    assert {r.calligrapher for r in train} == {r.calligrapher for r in test}
    assert len({r.character for r in train + test}) == 8
    for cal in {r.calligrapher for r in test}:
        assert len({r.character for r in test if r.calligrapher == cal}) == 2


def test_split_is_seeded():
    records = fake_records(5, 10, per_group=6)
    assert build_experiment_split(records, 5, 10, seed=4) == build_experiment_split(records, 5, 10, seed=4)


def test_split_degenerate_and_infeasible():
    records = fake_records(5, 10)
    train, test = build_experiment_split(records, 5, 10, train_frac=1.0)
    assert test == [] and len(train) == 50
    with pytest.raises(SplitError, match="6 required"):
        build_experiment_split(records, 6, 10)
    with pytest.raises(SplitError, match="share 10 characters, 11 required"):
        build_experiment_split(records, 5, 11)
