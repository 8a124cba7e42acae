from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from src.dataset_io import (
    DatasetManifest,
    ManifestMode,
    SamplingPlan,
    convert_class_tree,
    convert_paired_tree,
    load_manifest,
    load_segmentation_map,
    make_plan,
    write_augmented_manifest,
)
from src.errors import (
    InsufficientClassSupport,
    InvariantViolation,
    LabelOutOfRange,
    MissingFile,
    ParseError,
    UnknownClassId,
)
from src.models import (
    Augmentation,
    ClassificationTruth,
    TaskDescription,
    TaskKind,
    TestCase,
)
from tests.conftest import TASK_TEXT, write_jsonl
from tests.test_models import full_record

HEADER = {"dataset": "toy", "task": "classification", "task_text": TASK_TEXT, "class_count": 1000}


def synthetic_manifest(classes: int, per_class: int) -> DatasetManifest:
    entries = tuple(
        TestCase(f"c{c}-{i}", f"images/{c}_{i}.png", ClassificationTruth(c, f"class {c}"))
        for c in range(classes)
        for i in range(per_class)
    )
    return DatasetManifest(
        name="synthetic",
        task=TaskDescription(TaskKind.CLASSIFICATION, TASK_TEXT),
        entries=entries,
        class_count=classes,
    )


def test_load_toy_manifest(toy_dataset: Path):
    manifest = load_manifest(toy_dataset)
    assert len(manifest.entries) == 10
    assert manifest.class_count == 2
    assert manifest.entries[1].ground_truth == ClassificationTruth(1, "sphere")
    assert manifest.resolve(manifest.entries[0].image_ref).is_file()


def test_label_equal_to_class_count_is_out_of_range(tmp_path: Path):
    path = write_jsonl(tmp_path / "m.jsonl", [HEADER, {"id": "a", "image": "a.png", "label": 1000}])
    with pytest.raises(LabelOutOfRange) as info:
        load_manifest(path, check_files=False)
    assert info.value.line == 2


def test_missing_image_names_the_path(tmp_path: Path):
    path = write_jsonl(tmp_path / "m.jsonl", [HEADER, {"id": "a", "image": "nowhere.png", "label": 1}])
    with pytest.raises(MissingFile) as info:
        load_manifest(path)
    assert "nowhere.png" in str(info.value)


@pytest.mark.parametrize(
    "lines, line_no",
    [
        (["{not json"], 1),
        ([json.dumps({"id": "a", "image": "a.png", "label": 0})], 1),
        ([json.dumps(HEADER), json.dumps({"id": "a", "label": 0})], 2),
        ([json.dumps(HEADER), json.dumps({"id": "a", "image": "a.png", "label": 0}),
          json.dumps({"id": "a", "image": "b.png", "label": 0})], 3),
    ],
)
def test_parse_errors_carry_line_numbers(tmp_path: Path, lines, line_no):
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_manifest(path, check_files=False)
    assert info.value.line == line_no


def test_manifest_without_header_is_rejected(tmp_path: Path):
    path = write_jsonl(tmp_path / "bare.jsonl", [{"id": f"a{i}", "image": f"a{i}.png", "label": 0} for i in range(3)])
    with pytest.raises(ParseError) as info:
        load_manifest(path, check_files=False)
    assert info.value.line == 1
    assert info.value.expected == '"dataset"'


def test_segmentation_manifest_and_map(seg_dataset: Path):
    manifest = load_manifest(seg_dataset)
    assert manifest.task.kind is TaskKind.SEGMENTATION
    assert manifest.class_count == 4
    assert manifest.display_names() == ("Road", "SideWalk", "Vehicle", "Pedestrian")

    truth = manifest.entries[0].ground_truth
    decoded = load_segmentation_map(manifest.resolve(truth.mask_ref), dict(manifest.palette))
    assert decoded.grid.shape == (16, 16)
    assert set(np.unique(decoded.grid).tolist()) == {0, 1, 2, 3}


def test_segmentation_value_without_palette_entry(tmp_path: Path):
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[2, 3] = 9
    Image.fromarray(mask).save(tmp_path / "m.png")
    with pytest.raises(UnknownClassId) as info:
        load_segmentation_map(tmp_path / "m.png", {0: "Road"})
    assert (info.value.value, info.value.row, info.value.col) == (9, 2, 3)


def test_plan_cardinality_matches_the_full_dataset():
    manifest = synthetic_manifest(1000, 25)
    items = make_plan(manifest, SamplingPlan(per_class=25, augmentations_per_image=5, seed=0))
    assert len(items) == 125_000
    assert len({(i.case.id, i.augmentation_index) for i in items}) == 125_000


def test_plan_is_seeded_and_samples_without_replacement():
    manifest = synthetic_manifest(4, 10)
    plan = SamplingPlan(per_class=3, augmentations_per_image=2, seed=11)
    first = make_plan(manifest, plan)
    assert first == make_plan(manifest, plan)
    for c in range(4):
        picked = {i.case.id for i in first if i.case.ground_truth.label_id == c}
        assert len(picked) == 3
    other = make_plan(manifest, SamplingPlan(per_class=3, augmentations_per_image=2, seed=12))
    assert [i.case.id for i in other] != [i.case.id for i in first]


def test_derived_seeds_differ_per_augmentation():
    items = make_plan(synthetic_manifest(1, 1), SamplingPlan(1, 5, 0))
    assert len({i.derived_seed for i in items}) == 5


def test_insufficient_class_support():
    with pytest.raises(InsufficientClassSupport) as info:
        make_plan(synthetic_manifest(3, 2), SamplingPlan(per_class=3))
    assert (info.value.class_id, info.value.available) == (0, 2)


def test_segmentation_plan_draws_from_one_pool(seg_dataset: Path):
    manifest = load_manifest(seg_dataset)
    items = make_plan(manifest, SamplingPlan(per_class=2, augmentations_per_image=3, seed=4))
    assert len(items) == 2 * 3
    assert len({i.case.id for i in items}) == 2
    with pytest.raises(InsufficientClassSupport):
        make_plan(manifest, SamplingPlan(per_class=4))


def test_sampling_plan_rejects_zero():
    with pytest.raises(InvariantViolation):
        SamplingPlan(per_class=0)


def test_combined_manifest_holds_originals_and_augmentations(tmp_path: Path, toy_dataset: Path):
    source = load_manifest(toy_dataset)
    record = full_record(augmentations=3)
    out = tmp_path / "out" / "augmented.jsonl"
    summary = write_augmented_manifest(
        [record], out, ManifestMode.COMBINED, source_manifest=source, augmented_root=tmp_path / "out"
    )
    assert (summary.originals, summary.augmented, summary.total) == (1, 3, 4)

    rows = [json.loads(l) for l in out.read_text(encoding="utf-8").splitlines()]
    assert rows[0]["dataset"] == "toy"
    augmented = [r for r in rows[1:] if r["source"] == "augmented"]
    assert {r["label"] for r in augmented} == {14}
    assert augmented[0]["origin_id"] == "case-7"
    assert augmented[0]["image"] == "augmentations/case-7_0.png"


def test_augmented_only_manifest_refuses_a_relabelled_record(tmp_path: Path, toy_dataset: Path):
    import dataclasses

    record = full_record(augmentations=1)
    bad = dataclasses.replace(
        record,
        augmentations=(Augmentation(0, 1, "x.png", ClassificationTruth(3, "tench")),),
    )
    with pytest.raises(InvariantViolation):
        write_augmented_manifest(
            [bad], tmp_path / "a.jsonl", "augmented-only",
            source_manifest=load_manifest(toy_dataset), augmented_root=tmp_path,
        )


def test_convert_class_tree(tmp_path: Path):
    for name in ("dog", "cat"):
        folder = tmp_path / "tree" / name
        folder.mkdir(parents=True)
        for i in range(2):
            Image.fromarray(np.full((4, 4, 3), 10 * i, dtype=np.uint8)).save(folder / f"{i}.png")

    out = tmp_path / "tree.jsonl"
    summary = convert_class_tree(tmp_path / "tree", out, TASK_TEXT)
    manifest = load_manifest(out)
    assert summary.total == 4
    assert manifest.class_names == ("cat", "dog")
    assert manifest.entries[0].id == "cat/0"
    assert manifest.entries[-1].ground_truth.label_id == 1


def test_convert_paired_tree(seg_dataset: Path, tmp_path: Path):
    root = seg_dataset.parent
    out = tmp_path / "paired.jsonl"
    convert_paired_tree(root / "images", root / "masks", root / "palette.json", out, "Label pixels.")
    manifest = load_manifest(out)
    assert [c.id for c in manifest.entries] == ["frame_0", "frame_1", "frame_2"]
    assert manifest.class_count == 4
