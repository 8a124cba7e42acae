from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from src.errors import InvariantViolation, OutOfOrderStage
from src.models import (
    STAGE_ORDER,
    AlternativeMap,
    Augmentation,
    Caption,
    CaptionSource,
    ClassificationTruth,
    ConditioningRef,
    EditSelection,
    KeywordSet,
    SegmentationTruth,
    Stage,
    TaskDescription,
    TaskKind,
    TestCase,
    advance,
    assert_metamorphic,
    deserialize_record,
    new_record,
    serialize_record,
    stable_seed,
)

TASK = TaskDescription(TaskKind.CLASSIFICATION, "Classify the main object of the image.")
SEG_TASK = TaskDescription(TaskKind.SEGMENTATION, "Label every pixel.")
CAPTION = Caption(("A gray car driving down a foggy street.", "Trees line the road."))
KEYWORDS = KeywordSet(("gray", "foggy"))
ALTERNATIVES = AlternativeMap({"gray": ("red", "blue"), "foggy": ("snowy",)})


def case(n: int = 7, label: int = 14) -> TestCase:
    return TestCase(f"case-{n}", f"images/{n}.png", ClassificationTruth(label, "goldfinch"))


def full_record(augmentations: int = 5):
    record = new_record(case(), TASK)
    record = advance(record, CAPTION)
    record = advance(record, KEYWORDS)
    record = advance(record, ALTERNATIVES)
    record = advance(record, EditSelection((("foggy", "snowy"),), 1))
    record = advance(
        record,
        Caption.from_text(
            "A gray car driving down a snowy street. Trees line the road.",
            CaptionSource.COUNTERFACTUAL,
        ),
    )
    record = advance(record, ConditioningRef("conditioning/case-7.png"))
    augs = tuple(Augmentation(k, 100 + k, f"augmentations/case-7_{k}.png") for k in range(augmentations))
    return advance(record, augs)


def test_new_record_has_only_original_and_task():
    record = new_record(case(), TASK)
    assert record.original.id == "case-7"
    assert record.populated_stages() == ()
    assert record.next_stage() is Stage.CAPTION
    assert record.augmentations == ()


def test_new_record_carries_segmentation_map():
    grid = np.array([[0, 1], [1, 1]])
    truth = SegmentationTruth("masks/a.png", 2, 2, {0: "Road", 1: "SideWalk"}, grid=grid)
    record = new_record(TestCase("frame", "images/a.png", truth), SEG_TASK)
    assert record.original.ground_truth.grid is grid


def test_new_record_rejects_truth_of_the_wrong_kind():
    with pytest.raises(InvariantViolation):
        new_record(case(), SEG_TASK)


def test_ten_records_have_distinct_ids():
    records = [new_record(case(n), TASK) for n in range(10)]
    assert len({r.record_id for r in records}) == 10


def test_advance_fills_keywords_and_leaves_input_untouched():
    with_caption = advance(new_record(case(), TASK), CAPTION)
    with_keywords = advance(with_caption, KEYWORDS)
    assert with_keywords.keywords == KEYWORDS
    assert with_caption.keywords is None


def test_advance_refuses_keywords_before_caption():
    with pytest.raises(OutOfOrderStage):
        advance(new_record(case(), TASK), KEYWORDS)


def test_advance_refuses_a_stage_twice():
    record = advance(new_record(case(), TASK), CAPTION)
    with pytest.raises(OutOfOrderStage):
        advance(record, Caption(("Another caption.",)))


def test_alternative_for_unknown_keyword_is_an_invariant_violation():
    record = advance(advance(new_record(case(), TASK), CAPTION), KEYWORDS)
    with pytest.raises(InvariantViolation):
        advance(record, AlternativeMap({"snow": ("rain",)}))


def test_keywords_match_case_insensitively():
    record = advance(advance(new_record(case(), TASK), CAPTION), KeywordSet(("Gray", "foggy")))
    record = advance(record, AlternativeMap({"gray ": ("red",)}))
    assert record.alternatives.keys() == ("gray",)


@pytest.mark.parametrize(
    "build",
    [
        lambda: KeywordSet(()),
        lambda: KeywordSet(("Fog", "fog")),
        lambda: AlternativeMap({"gray": ()}),
        lambda: AlternativeMap({"gray": ("Gray",)}),
        lambda: Caption(()),
        lambda: Caption(("A car.", " ")),
    ],
)
def test_type_invariants(build):
    with pytest.raises(InvariantViolation):
        build()


def test_edit_count_must_match_budget():
    record = advance(advance(advance(new_record(case(), TASK), CAPTION), KEYWORDS), ALTERNATIVES)
    with pytest.raises(InvariantViolation):
        advance(record, EditSelection((("gray", "red"),), 2))
    with pytest.raises(InvariantViolation):
        advance(record, EditSelection((("gray", "green"),), 1))


def test_counterfactual_must_differ_when_edits_exist():
    record = advance(advance(advance(new_record(case(), TASK), CAPTION), KEYWORDS), ALTERNATIVES)
    record = advance(record, EditSelection((("gray", "red"),), 1))
    same = Caption(CAPTION.sentences, CaptionSource.COUNTERFACTUAL)
    with pytest.raises(InvariantViolation):
        advance(record, same)


def test_stage_monotonicity():
    record = full_record()
    assert record.populated_stages() == STAGE_ORDER
    assert record.next_stage() is None


def test_assert_metamorphic_passes_for_inherited_labels():
    verdict = assert_metamorphic(full_record())
    assert verdict.passed
    assert all(full_record().truth_of(a).label_id == 14 for a in full_record().augmentations)


def test_assert_metamorphic_fails_for_relabelled_augmentation():
    record = full_record()
    relabelled = record.augmentations[:4] + (
        dataclasses.replace(record.augmentations[4], ground_truth=ClassificationTruth(3, "tench")),
    )
    verdict = assert_metamorphic(dataclasses.replace(record, augmentations=relabelled))
    assert not verdict
    assert verdict.failing_augmentations == (4,)


def test_assert_metamorphic_without_augmentations_fails():
    record = new_record(case(), TASK)
    assert not assert_metamorphic(record).passed


def test_segmentation_record_passes_when_augmentations_reference_original_map():
    truth = SegmentationTruth("masks/a.png", 2, 2, {0: "Road", 1: "Vehicle"})
    record = new_record(TestCase("frame", "images/a.png", truth), SEG_TASK)
    record = dataclasses.replace(record, augmentations=(Augmentation(0, 1, "a_0.png"),))
    assert assert_metamorphic(record)


def test_ledger_line_roundtrip():
    record = full_record().with_provenance(config_hash="abc", edit_seed=42)
    line = serialize_record(record)
    assert "\n" not in line
    assert deserialize_record(line) == record
    assert serialize_record(deserialize_record(line)) == line


def test_stable_seed_is_deterministic_and_sensitive():
    assert stable_seed(0, "case-1", 2) == stable_seed(0, "case-1", 2)
    assert stable_seed(0, "case-1", 2) != stable_seed(0, "case-1", 3)
    assert 0 <= stable_seed("x") < 2**64
