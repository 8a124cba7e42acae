# src/models.py
"""
Domain types and the metamorphic ledger record.

A MetamorphicRecord carries the whole augmentation chain for one original
test case: caption -> keywords -> alternatives -> edit selection ->
counterfactual caption -> conditioning -> augmentations. Records are frozen
values; `advance` returns a new record with the next stage filled in.

Augmentations do not copy the ground truth of the original: they resolve it
through the record, so the metamorphic relation holds by construction. An
augmentation may carry an explicit `ground_truth` override only when built by
hand (advance refuses overrides that differ from the original).
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Tuple, Union

import numpy as np

from src.errors import InvariantViolation, OutOfOrderStage, ParseError

SCHEMA_VERSION = 1


class TaskKind(str, Enum):
    CLASSIFICATION = "classification"
    SEGMENTATION = "segmentation"


class CaptionSource(str, Enum):
    CAPTIONER = "captioner"
    COUNTERFACTUAL = "counterfactual"


class Stage(str, Enum):
    """Ledger stages, in pipeline order."""

    CAPTION = "caption"
    KEYWORDS = "keywords"
    ALTERNATIVES = "alternatives"
    EDITS = "edits"
    COUNTERFACTUAL = "counterfactual"
    CONDITIONING = "conditioning"
    AUGMENTATIONS = "augmentations"


STAGE_ORDER: Tuple[Stage, ...] = tuple(Stage)


def stable_seed(*parts: Any) -> int:
    """64-bit seed derived from `parts`; identical across processes and runs."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def normalize_keyword(text: str) -> str:
    """Whitespace-collapsed, case-folded form used for every keyword match."""
    return " ".join(text.split()).casefold()


# ---------------------------------------------------------------------------
# Task + ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskDescription:
    kind: TaskKind
    text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not self.text or not self.text.strip():
            raise InvariantViolation("task description text must be non-empty")


@dataclass(frozen=True)
class ClassificationTruth:
    label_id: int
    label_name: str

    def __post_init__(self) -> None:
        if int(self.label_id) < 0:
            raise InvariantViolation(f"negative label id {self.label_id}")
        object.__setattr__(self, "label_id", int(self.label_id))


@dataclass(frozen=True)
class SegmentationTruth:
    """
    Per-pixel class-id map. The ledger keeps only `mask_ref`; `grid` is the
    decoded map when it has been loaded and never takes part in equality.
    """

    mask_ref: str
    height: int
    width: int
    palette: Tuple[Tuple[int, str], ...]
    grid: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        palette = self.palette
        if isinstance(palette, Mapping):
            palette = palette.items()
        normalized = tuple(sorted((int(k), str(v)) for k, v in palette))
        object.__setattr__(self, "palette", normalized)

        if self.height <= 0 or self.width <= 0:
            raise InvariantViolation("segmentation map must have positive size")

        if self.grid is not None:
            if tuple(self.grid.shape) != (self.height, self.width):
                raise InvariantViolation(
                    f"grid shape {self.grid.shape} != ({self.height}, {self.width})"
                )
            known = {k for k, _ in normalized}
            unknown = set(np.unique(self.grid).tolist()) - known
            if unknown:
                raise InvariantViolation(
                    f"segmentation values without palette entry: {sorted(unknown)}"
                )

    @property
    def palette_dict(self) -> Dict[int, str]:
        return dict(self.palette)


GroundTruth = Union[ClassificationTruth, SegmentationTruth]


@dataclass(frozen=True)
class TestCase:
    id: str
    image_ref: str
    ground_truth: GroundTruth
    source: str = "original"
    origin_id: str | None = None
    augmentation_index: int | None = None

    __test__ = False  # not a pytest class

    def __post_init__(self) -> None:
        if not self.id:
            raise InvariantViolation("test case id must be non-empty")
        if not self.image_ref:
            raise InvariantViolation(f"test case {self.id} has no image reference")


# ---------------------------------------------------------------------------
# Stage payloads
# ---------------------------------------------------------------------------

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+|\n+")


@dataclass(frozen=True)
class Caption:
    sentences: Tuple[str, ...]
    source: CaptionSource = CaptionSource.CAPTIONER

    def __post_init__(self) -> None:
        sentences = tuple(str(s).strip() for s in self.sentences)
        if not sentences:
            raise InvariantViolation("caption needs at least one sentence")
        if any(not s for s in sentences):
            raise InvariantViolation("caption contains an empty sentence")
        for sentence in sentences:
            try:
                sentence.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise InvariantViolation(f"caption is not valid UTF-8 text: {exc.reason}") from exc
        object.__setattr__(self, "sentences", sentences)
        object.__setattr__(self, "source", CaptionSource(self.source))

    @classmethod
    def from_text(
        cls, text: str, source: CaptionSource = CaptionSource.CAPTIONER
    ) -> "Caption":
        parts = [p.strip() for p in _SENTENCE_SPLIT.split(text or "")]
        return cls(tuple(p for p in parts if p), source)

    @property
    def text(self) -> str:
        return " ".join(self.sentences)


@dataclass(frozen=True)
class KeywordSet:
    keywords: Tuple[str, ...]

    def __post_init__(self) -> None:
        keywords = tuple(" ".join(str(k).split()) for k in self.keywords)
        if not keywords:
            raise InvariantViolation("keyword set is empty")
        if any(not k for k in keywords):
            raise InvariantViolation("keyword set contains an empty keyword")
        seen: set[str] = set()
        for k in keywords:
            norm = normalize_keyword(k)
            if norm in seen:
                raise InvariantViolation(f"duplicate keyword {k!r}")
            seen.add(norm)
        object.__setattr__(self, "keywords", keywords)

    def __contains__(self, keyword: object) -> bool:
        if not isinstance(keyword, str):
            return False
        return normalize_keyword(keyword) in {normalize_keyword(k) for k in self.keywords}

    def __len__(self) -> int:
        return len(self.keywords)


@dataclass(frozen=True)
class AlternativeMap:
    entries: Tuple[Tuple[str, Tuple[str, ...]], ...]

    def __post_init__(self) -> None:
        raw = self.entries.items() if isinstance(self.entries, Mapping) else self.entries
        entries: List[Tuple[str, Tuple[str, ...]]] = []
        seen: set[str] = set()
        for keyword, alternatives in raw:
            keyword = " ".join(str(keyword).split())
            alternatives = tuple(" ".join(str(a).split()) for a in alternatives)
            norm = normalize_keyword(keyword)
            if not keyword:
                raise InvariantViolation("alternative map has an empty keyword")
            if norm in seen:
                raise InvariantViolation(f"duplicate alternative key {keyword!r}")
            if not alternatives or any(not a for a in alternatives):
                raise InvariantViolation(f"no usable alternatives for {keyword!r}")
            if any(normalize_keyword(a) == norm for a in alternatives):
                raise InvariantViolation(
                    f"alternative equal to its keyword {keyword!r}"
                )
            seen.add(norm)
            entries.append((keyword, alternatives))
        object.__setattr__(self, "entries", tuple(entries))

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> Tuple[str, ...]:
        return tuple(k for k, _ in self.entries)

    def get(self, keyword: str) -> Tuple[str, ...] | None:
        norm = normalize_keyword(keyword)
        for k, alternatives in self.entries:
            if normalize_keyword(k) == norm:
                return alternatives
        return None

    def as_dict(self) -> Dict[str, List[str]]:
        return {k: list(v) for k, v in self.entries}


@dataclass(frozen=True)
class EditSelection:
    applied: Tuple[Tuple[str, str], ...]
    budget: int | None  # None = apply every keyword

    def __post_init__(self) -> None:
        applied = tuple((str(k), str(a)) for k, a in self.applied)
        if self.budget is not None and self.budget < 0:
            raise InvariantViolation(f"negative edit budget {self.budget}")
        keys = [normalize_keyword(k) for k, _ in applied]
        if len(set(keys)) != len(keys):
            raise InvariantViolation("edit selection repeats a keyword")
        if self.budget is not None and len(applied) > self.budget:
            raise InvariantViolation("edit selection exceeds its budget")
        object.__setattr__(self, "applied", applied)

    def __len__(self) -> int:
        return len(self.applied)


@dataclass(frozen=True)
class ConditioningRef:
    """Edge map written next to the ledger plus the parameters that made it."""

    ref: str
    method: str = "canny"
    low_threshold: float = 0.1
    high_threshold: float = 0.2
    blur_sigma: float = 1.4


@dataclass(frozen=True)
class Augmentation:
    index: int
    seed: int
    image_ref: str
    ground_truth: GroundTruth | None = None  # None = inherited from the original


# ---------------------------------------------------------------------------
# The ledger record
# ---------------------------------------------------------------------------

_STAGE_FIELDS: Dict[Stage, str] = {
    Stage.CAPTION: "caption",
    Stage.KEYWORDS: "keywords",
    Stage.ALTERNATIVES: "alternatives",
    Stage.EDITS: "edits",
    Stage.COUNTERFACTUAL: "counterfactual",
    Stage.CONDITIONING: "conditioning",
    Stage.AUGMENTATIONS: "augmentations",
}


@dataclass(frozen=True)
class MetamorphicRecord:
    record_id: str
    original: TestCase
    task: TaskDescription
    caption: Caption | None = None
    keywords: KeywordSet | None = None
    alternatives: AlternativeMap | None = None
    edits: EditSelection | None = None
    counterfactual: Caption | None = None
    conditioning: ConditioningRef | None = None
    augmentations: Tuple[Augmentation, ...] = ()
    detected_edits: Tuple[str, ...] = ()
    provenance: Tuple[Tuple[str, Any], ...] = ()

    @property
    def conditioning_ref(self) -> str | None:
        return self.conditioning.ref if self.conditioning else None

    def populated_stages(self) -> Tuple[Stage, ...]:
        out = []
        for stage in STAGE_ORDER:
            value = getattr(self, _STAGE_FIELDS[stage])
            if value is None or (stage is Stage.AUGMENTATIONS and not value):
                continue
            out.append(stage)
        return tuple(out)

    def next_stage(self) -> Stage | None:
        populated = self.populated_stages()
        if len(populated) == len(STAGE_ORDER):
            return None
        return STAGE_ORDER[len(populated)]

    def truth_of(self, augmentation: Augmentation) -> GroundTruth:
        if augmentation.ground_truth is not None:
            return augmentation.ground_truth
        return self.original.ground_truth

    def provenance_dict(self) -> Dict[str, Any]:
        return dict(self.provenance)

    def with_provenance(self, **values: Any) -> "MetamorphicRecord":
        merged = dict(self.provenance)
        merged.update(values)
        return replace(self, provenance=tuple(sorted(merged.items())))


@dataclass(frozen=True)
class MetamorphicVerdict:
    record_id: str
    passed: bool
    failing_augmentations: Tuple[int, ...] = ()
    reason: str = ""

    def __bool__(self) -> bool:
        return self.passed


def new_record(
    test_case: TestCase,
    task: TaskDescription,
    record_id: str | None = None,
) -> MetamorphicRecord:
    expected = (
        ClassificationTruth
        if task.kind is TaskKind.CLASSIFICATION
        else SegmentationTruth
    )
    if not isinstance(test_case.ground_truth, expected):
        raise InvariantViolation(
            f"test case {test_case.id} ground truth does not fit a {task.kind.value} task"
        )
    return MetamorphicRecord(
        record_id=record_id or test_case.id,
        original=test_case,
        task=task,
    )


def _stage_of(payload: Any) -> Stage:
    if isinstance(payload, Caption):
        if payload.source is CaptionSource.COUNTERFACTUAL:
            return Stage.COUNTERFACTUAL
        return Stage.CAPTION
    if isinstance(payload, KeywordSet):
        return Stage.KEYWORDS
    if isinstance(payload, AlternativeMap):
        return Stage.ALTERNATIVES
    if isinstance(payload, EditSelection):
        return Stage.EDITS
    if isinstance(payload, ConditioningRef):
        return Stage.CONDITIONING
    if isinstance(payload, (tuple, list)) and all(
        isinstance(a, Augmentation) for a in payload
    ):
        return Stage.AUGMENTATIONS
    raise InvariantViolation(f"unsupported stage payload {type(payload).__name__}")


def _check_payload(record: MetamorphicRecord, stage: Stage, payload: Any) -> None:
    if stage is Stage.ALTERNATIVES:
        for keyword in payload.keys():
            if keyword not in record.keywords:
                raise InvariantViolation(
                    f"alternative key {keyword!r} is not among the record's keywords"
                )

    elif stage is Stage.EDITS:
        alternatives = record.alternatives
        for keyword, choice in payload.applied:
            options = alternatives.get(keyword)
            if options is None:
                raise InvariantViolation(f"edit keyword {keyword!r} has no alternatives")
            if normalize_keyword(choice) not in {normalize_keyword(o) for o in options}:
                raise InvariantViolation(
                    f"edit {keyword!r} -> {choice!r} not drawn from the alternative map"
                )
        budget = len(alternatives) if payload.budget is None else payload.budget
        if len(payload) != min(budget, len(alternatives)):
            raise InvariantViolation(
                f"edit selection has {len(payload)} edits, expected "
                f"min({budget}, {len(alternatives)})"
            )

    elif stage is Stage.COUNTERFACTUAL:
        same = normalize_keyword(payload.text) == normalize_keyword(record.caption.text)
        if len(record.edits) > 0 and same:
            raise InvariantViolation("counterfactual caption equals the original caption")
        if len(record.edits) == 0 and not same:
            raise InvariantViolation("counterfactual caption changed without any edit")

    elif stage is Stage.AUGMENTATIONS:
        if not payload:
            raise InvariantViolation("augmentation stage needs at least one image")
        indices = [a.index for a in payload]
        if len(set(indices)) != len(indices):
            raise InvariantViolation("duplicate augmentation index")
        for aug in payload:
            if aug.ground_truth is not None and aug.ground_truth != record.original.ground_truth:
                raise InvariantViolation(
                    f"augmentation {aug.index} relabels the original ground truth"
                )


def advance(record: MetamorphicRecord, payload: Any) -> MetamorphicRecord:
    """Return a copy of `record` with the next pipeline stage filled in."""
    stage = _stage_of(payload)
    expected = record.next_stage()

    if stage in record.populated_stages():
        raise OutOfOrderStage(f"stage {stage.value!r} is already populated")
    if expected is None or stage is not expected:
        raise OutOfOrderStage(
            f"stage {stage.value!r} supplied before {expected.value if expected else 'end'!r}"
        )

    _check_payload(record, stage, payload)

    if stage is Stage.AUGMENTATIONS:
        payload = tuple(sorted(payload, key=lambda a: a.index))
    return replace(record, **{_STAGE_FIELDS[stage]: payload})


def assert_metamorphic(record: MetamorphicRecord) -> MetamorphicVerdict:
    """Check that every augmentation carries the original's ground truth."""
    if not record.augmentations:
        return MetamorphicVerdict(record.record_id, False, (), "record has no augmentations")

    expected = record.original.ground_truth
    failing = tuple(
        aug.index for aug in record.augmentations if record.truth_of(aug) != expected
    )
    if failing:
        return MetamorphicVerdict(
            record.record_id, False, failing, "augmentation ground truth differs"
        )
    return MetamorphicVerdict(record.record_id, True)


# ---------------------------------------------------------------------------
# JSON (one record per ledger line)
# ---------------------------------------------------------------------------


def truth_to_dict(truth: GroundTruth) -> Dict[str, Any]:
    if isinstance(truth, ClassificationTruth):
        return {
            "kind": TaskKind.CLASSIFICATION.value,
            "label_id": truth.label_id,
            "label_name": truth.label_name,
        }
    return {
        "kind": TaskKind.SEGMENTATION.value,
        "mask_ref": truth.mask_ref,
        "height": truth.height,
        "width": truth.width,
        "palette": {str(k): v for k, v in truth.palette},
    }


def truth_from_dict(data: Mapping[str, Any]) -> GroundTruth:
    if data["kind"] == TaskKind.CLASSIFICATION.value:
        return ClassificationTruth(int(data["label_id"]), str(data["label_name"]))
    return SegmentationTruth(
        mask_ref=data["mask_ref"],
        height=int(data["height"]),
        width=int(data["width"]),
        palette=tuple((int(k), v) for k, v in data["palette"].items()),
    )


def _caption_to_dict(caption: Caption | None) -> Dict[str, Any] | None:
    if caption is None:
        return None
    return {"sentences": list(caption.sentences), "source": caption.source.value}


def _caption_from_dict(data: Mapping[str, Any] | None) -> Caption | None:
    if data is None:
        return None
    return Caption(tuple(data["sentences"]), CaptionSource(data["source"]))


def record_to_dict(record: MetamorphicRecord) -> Dict[str, Any]:
    original = record.original
    augmentations = []
    for aug in record.augmentations:
        entry: Dict[str, Any] = {"index": aug.index, "seed": aug.seed, "image_ref": aug.image_ref}
        if aug.ground_truth is not None:
            entry["ground_truth"] = truth_to_dict(aug.ground_truth)
        augmentations.append(entry)

    conditioning = None
    if record.conditioning is not None:
        c = record.conditioning
        conditioning = {
            "ref": c.ref,
            "method": c.method,
            "low_threshold": c.low_threshold,
            "high_threshold": c.high_threshold,
            "blur_sigma": c.blur_sigma,
        }

    return {
        "schema_version": SCHEMA_VERSION,
        "record_id": record.record_id,
        "task": {"kind": record.task.kind.value, "text": record.task.text},
        "original": {
            "id": original.id,
            "image_ref": original.image_ref,
            "ground_truth": truth_to_dict(original.ground_truth),
            "source": original.source,
            "origin_id": original.origin_id,
            "augmentation_index": original.augmentation_index,
        },
        "caption": _caption_to_dict(record.caption),
        "keywords": list(record.keywords.keywords) if record.keywords is not None else None,
        # list of pairs: keeps the LLM's ordering under sort_keys
        "alternatives": (
            [[k, list(v)] for k, v in record.alternatives.entries]
            if record.alternatives is not None
            else None
        ),
        "edits": (
            {"applied": [list(p) for p in record.edits.applied], "budget": record.edits.budget}
            if record.edits is not None
            else None
        ),
        "counterfactual": _caption_to_dict(record.counterfactual),
        "conditioning": conditioning,
        "augmentations": augmentations,
        "detected_edits": list(record.detected_edits),
        "provenance": dict(record.provenance),
    }


def record_from_dict(data: Mapping[str, Any]) -> MetamorphicRecord:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported ledger schema_version {version!r}")

    o = data["original"]
    original = TestCase(
        id=o["id"],
        image_ref=o["image_ref"],
        ground_truth=truth_from_dict(o["ground_truth"]),
        source=o.get("source", "original"),
        origin_id=o.get("origin_id"),
        augmentation_index=o.get("augmentation_index"),
    )
    c = data.get("conditioning")
    return MetamorphicRecord(
        record_id=data["record_id"],
        original=original,
        task=TaskDescription(TaskKind(data["task"]["kind"]), data["task"]["text"]),
        caption=_caption_from_dict(data.get("caption")),
        keywords=KeywordSet(tuple(data["keywords"])) if data.get("keywords") is not None else None,
        alternatives=(
            AlternativeMap(tuple((k, tuple(v)) for k, v in data["alternatives"]))
            if data.get("alternatives") is not None
            else None
        ),
        edits=(
            EditSelection(
                tuple(tuple(p) for p in data["edits"]["applied"]),
                data["edits"]["budget"],
            )
            if data.get("edits") is not None
            else None
        ),
        counterfactual=_caption_from_dict(data.get("counterfactual")),
        conditioning=ConditioningRef(**c) if c else None,
        augmentations=tuple(
            Augmentation(
                index=int(a["index"]),
                seed=int(a["seed"]),
                image_ref=a["image_ref"],
                ground_truth=(
                    truth_from_dict(a["ground_truth"]) if "ground_truth" in a else None
                ),
            )
            for a in data.get("augmentations", [])
        ),
        detected_edits=tuple(data.get("detected_edits", [])),
        provenance=tuple(sorted((data.get("provenance") or {}).items())),
    )


def serialize_record(record: MetamorphicRecord) -> str:
    return json.dumps(
        record_to_dict(record),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )


def deserialize_record(line: str) -> MetamorphicRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"ledger line is not JSON: {exc.msg}", offset=exc.pos) from exc
    return record_from_dict(data)

