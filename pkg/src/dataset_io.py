# src/dataset_io.py
"""
Dataset manifests (JSONL), sampling plans, segmentation maps and augmented
manifest output.

Manifest layout: the first line is a header object, every other line one test
case. Relative paths resolve against the manifest's directory.

    {"dataset": "toy", "task": "classification", "task_text": "...",
     "class_count": 2, "class_names": ["cat", "dog"]}
    {"id": "cat/0001", "image": "images/cat_0001.png", "label": 0}
    {"id": "frame-7", "image": "images/7.png", "mask": "masks/7.png"}   # segmentation

Optional entry keys: "source" (original | augmented), "origin_id",
"augmentation_index".
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.errors import (
    DecodeError,
    InsufficientClassSupport,
    InvariantViolation,
    LabelOutOfRange,
    MissingFile,
    ParseError,
    UnknownClassId,
    WriteError,
)
from src.images import image_size
from src.ledger import exclusive_lock
from src.models import (
    ClassificationTruth,
    MetamorphicRecord,
    SegmentationTruth,
    TaskDescription,
    TaskKind,
    TestCase,
    assert_metamorphic,
    stable_seed,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    task: TaskDescription
    entries: Tuple[TestCase, ...]
    class_count: int
    class_names: Tuple[str, ...] = ()
    root: Path = Path(".")
    palette: Tuple[Tuple[int, str], ...] = ()
    palette_ref: str | None = None

    def resolve(self, ref: str) -> Path:
        path = Path(ref)
        return path if path.is_absolute() else self.root / path

    def class_name(self, label_id: int) -> str:
        if 0 <= label_id < len(self.class_names):
            return self.class_names[label_id]
        return str(label_id)

    def display_names(self) -> Tuple[str, ...]:
        """Class names indexed by class id (palette for segmentation)."""
        if self.task.kind is TaskKind.SEGMENTATION and self.palette:
            names = dict(self.palette)
            return tuple(names.get(i, str(i)) for i in range(self.class_count))
        return tuple(self.class_name(i) for i in range(self.class_count))


@dataclass(frozen=True)
class SamplingPlan:
    per_class: int = 25
    augmentations_per_image: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.per_class < 1:
            raise InvariantViolation("per_class must be at least 1")
        if self.augmentations_per_image < 1:
            raise InvariantViolation("augmentations_per_image must be at least 1")


@dataclass(frozen=True)
class WorkItem:
    case: TestCase
    augmentation_index: int
    derived_seed: int


class ManifestMode(str, Enum):
    AUGMENTED_ONLY = "augmented-only"
    COMBINED = "combined"


@dataclass(frozen=True)
class ManifestSummary:
    path: Path
    mode: ManifestMode
    originals: int
    augmented: int

    @property
    def total(self) -> int:
        return self.originals + self.augmented


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_palette(path: str | Path) -> Dict[int, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return {int(k): str(v) for k, v in raw.items()}
    except (json.JSONDecodeError, AttributeError, ValueError) as exc:
        raise ParseError(f"palette {path} is not an id -> name object: {exc}") from exc


def _parse_json_line(line: str, lineno: int) -> Dict[str, Any]:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=lineno) from exc
    if not isinstance(data, dict):
        raise ParseError("line is not a JSON object", line=lineno)
    return data


def _parse_header(data: Dict[str, Any], lineno: int) -> Dict[str, Any]:
    if "dataset" not in data:
        raise ParseError("first line must be the dataset header", line=lineno, expected='"dataset"')
    try:
        kind = TaskKind(data.get("task", TaskKind.CLASSIFICATION.value))
    except ValueError as exc:
        raise ParseError(f"unknown task kind {data.get('task')!r}", line=lineno) from exc
    task_text = data.get("task_text") or ""
    if not str(task_text).strip():
        raise ParseError("header lacks task_text", line=lineno, expected='"task_text"')
    return {
        "name": str(data["dataset"]),
        "task": TaskDescription(kind, str(task_text)),
        "class_count": data.get("class_count"),
        "class_names": tuple(str(n) for n in data.get("class_names", [])),
        "palette": data.get("palette"),
    }


def load_manifest(path: str | Path, *, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a JSONL manifest."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    root = path.parent

    header: Dict[str, Any] | None = None
    palette: Dict[int, str] = {}
    entries: List[TestCase] = []
    seen_ids: set[str] = set()

    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            data = _parse_json_line(line, lineno)

            if header is None:
                header = _parse_header(data, lineno)
                if header["task"].kind is TaskKind.SEGMENTATION:
                    if not header["palette"]:
                        raise ParseError("segmentation header needs a palette", line=lineno)
                    palette = load_palette(root / header["palette"])
                    if header["class_count"] is None:
                        header["class_count"] = max(palette) + 1
                if not isinstance(header["class_count"], int) or header["class_count"] < 1:
                    raise ParseError("class_count must be a positive integer", line=lineno)
                continue

            case = _parse_entry(data, lineno, header, palette, root, check_files)
            if case.id in seen_ids:
                raise ParseError(f"duplicate id {case.id!r}", line=lineno)
            seen_ids.add(case.id)
            entries.append(case)

    if header is None:
        raise ParseError("manifest is empty", line=1, expected="dataset header")
    if not entries:
        raise ParseError("manifest has no entries")

    logger.info("Loaded manifest %s: %d entries, %d classes", path, len(entries), header["class_count"])
    return DatasetManifest(
        name=header["name"],
        task=header["task"],
        entries=tuple(entries),
        class_count=header["class_count"],
        class_names=header["class_names"],
        root=root,
        palette=tuple(sorted(palette.items())),
        palette_ref=header["palette"],
    )


def _parse_entry(
    data: Dict[str, Any],
    lineno: int,
    header: Dict[str, Any],
    palette: Dict[int, str],
    root: Path,
    check_files: bool,
) -> TestCase:
    case_id = data.get("id")
    image = data.get("image")
    if not isinstance(case_id, str) or not case_id:
        raise ParseError("entry lacks a string id", line=lineno, expected='"id"')
    if not isinstance(image, str) or not image:
        raise ParseError("entry lacks an image path", line=lineno, expected='"image"')
    if check_files and not (root / image).is_file():
        raise MissingFile(root / image)

    kind = header["task"].kind
    if kind is TaskKind.CLASSIFICATION:
        label = data.get("label")
        if not isinstance(label, int) or isinstance(label, bool):
            raise ParseError("entry lacks an integer label", line=lineno, expected='"label"')
        if not 0 <= label < header["class_count"]:
            raise LabelOutOfRange(label, header["class_count"], line=lineno)
        names = header["class_names"]
        truth = ClassificationTruth(label, names[label] if label < len(names) else str(label))
    else:
        mask = data.get("mask")
        if not isinstance(mask, str) or not mask:
            raise ParseError("entry lacks a mask path", line=lineno, expected='"mask"')
        if check_files:
            mask_size = image_size(root / mask)
            if mask_size != image_size(root / image):
                raise InvariantViolation(
                    f"line {lineno}: mask {mask} is {mask_size}, image is {image_size(root / image)}"
                )
            height, width = mask_size
        else:
            height, width = int(data.get("height", 1)), int(data.get("width", 1))
        truth = SegmentationTruth(mask, height, width, tuple(palette.items()))

    return TestCase(
        id=case_id,
        image_ref=image,
        ground_truth=truth,
        source=str(data.get("source", "original")),
        origin_id=data.get("origin_id"),
        augmentation_index=data.get("augmentation_index"),
    )


def load_segmentation_map(
    path: str | Path,
    palette: Dict[int, str],
    mask_ref: str | None = None,
) -> SegmentationTruth:
    """Decode an 8-bit indexed PNG whose pixel values are class ids."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L", "I", "I;16"):
                raise DecodeError(f"{path} is {img.mode}, expected an indexed/grayscale map")
            grid = np.asarray(img, dtype=np.int64).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode segmentation map {path}: {exc}") from exc

    known = np.array(sorted(palette), dtype=np.int64)
    bad = np.argwhere(~np.isin(grid, known))
    if bad.size:
        row, col = (int(v) for v in bad[0])
        raise UnknownClassId(int(grid[row, col]), row, col)

    height, width = grid.shape
    return SegmentationTruth(
        mask_ref=mask_ref or str(path),
        height=height,
        width=width,
        palette=tuple(palette.items()),
        grid=grid,
    )


# ---------------------------------------------------------------------------
# Sampling plan
# ---------------------------------------------------------------------------


def _groups(manifest: DatasetManifest) -> Dict[int, List[TestCase]]:
    groups: Dict[int, List[TestCase]] = {}
    if manifest.task.kind is TaskKind.CLASSIFICATION:
        for c in range(manifest.class_count):
            groups[c] = []
        for case in manifest.entries:
            groups[case.ground_truth.label_id].append(case)
    else:
        # segmentation frames have no single class; one pool
        groups[0] = list(manifest.entries)
    for cases in groups.values():
        cases.sort(key=lambda c: c.id)
    return groups


def make_plan(manifest: DatasetManifest, plan: SamplingPlan) -> List[WorkItem]:
    """
    Pick `per_class` cases per class (seeded, without replacement) and expand
    each into `augmentations_per_image` work items with derived seeds.
    """
    items: List[WorkItem] = []
    for class_id, cases in _groups(manifest).items():
        if len(cases) < plan.per_class:
            raise InsufficientClassSupport(class_id, len(cases), plan.per_class)

        rng = np.random.default_rng(stable_seed(plan.seed, "class", class_id))
        picked = sorted(rng.choice(len(cases), size=plan.per_class, replace=False).tolist())

        for idx in picked:
            case = cases[idx]
            for k in range(plan.augmentations_per_image):
                items.append(WorkItem(case, k, stable_seed(plan.seed, case.id, k)))

    return items


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _rel(path: Path, base: Path) -> str:
    return Path(os.path.relpath(path.resolve(), base.resolve())).as_posix()


def _write_jsonl(out_path: Path, rows: Iterable[Dict[str, Any]]) -> None:
    tmp = out_path.with_name(f".{out_path.name}.tmp")
    try:
        with exclusive_lock(out_path):
            with tmp.open("w", encoding="utf-8", newline="\n") as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
            os.replace(tmp, out_path)
    except OSError as exc:
        raise WriteError(f"could not write manifest {out_path}: {exc}") from exc


def _header_row(manifest: DatasetManifest, out_dir: Path) -> Dict[str, Any]:
    header: Dict[str, Any] = {
        "dataset": manifest.name,
        "task": manifest.task.kind.value,
        "task_text": manifest.task.text,
        "class_count": manifest.class_count,
    }
    if manifest.class_names:
        header["class_names"] = list(manifest.class_names)
    if manifest.palette_ref:
        header["palette"] = _rel(manifest.resolve(manifest.palette_ref), out_dir)
    return header


def _truth_fields(truth, manifest: DatasetManifest, out_dir: Path) -> Dict[str, Any]:
    if isinstance(truth, ClassificationTruth):
        return {"label": truth.label_id}
    return {"mask": _rel(manifest.resolve(truth.mask_ref), out_dir)}


def write_augmented_manifest(
    records: Sequence[MetamorphicRecord],
    out_path: str | Path,
    mode: ManifestMode | str,
    *,
    source_manifest: DatasetManifest,
    augmented_root: str | Path,
) -> ManifestSummary:
    """
    Emit a manifest of the generated images (labels copied from the originals)
    or, in combined mode, originals plus augmentations for retraining.
    """
    mode = ManifestMode(mode)
    out_path = Path(out_path)
    out_dir = out_path.parent
    augmented_root = Path(augmented_root)

    for record in records:
        verdict = assert_metamorphic(record)
        if not verdict:
            raise InvariantViolation(
                f"record {record.record_id} fails the metamorphic check: {verdict.reason}"
            )

    rows: List[Dict[str, Any]] = [_header_row(source_manifest, out_dir)]
    originals = 0
    if mode is ManifestMode.COMBINED:
        seen: set[str] = set()
        for record in records:
            case = record.original
            if case.id in seen:
                continue
            seen.add(case.id)
            row = {"id": case.id, "image": _rel(source_manifest.resolve(case.image_ref), out_dir), "source": "original"}
            row.update(_truth_fields(case.ground_truth, source_manifest, out_dir))
            rows.append(row)
            originals += 1

    augmented = 0
    for record in records:
        for aug in record.augmentations:
            row = {
                "id": f"{record.record_id}-aug{aug.index}",
                "image": _rel(augmented_root / aug.image_ref, out_dir),
                "source": "augmented",
                "origin_id": record.original.id,
                "augmentation_index": aug.index,
            }
            row.update(_truth_fields(record.truth_of(aug), source_manifest, out_dir))
            rows.append(row)
            augmented += 1

    _write_jsonl(out_path, rows)
    logger.info("Wrote %s manifest %s (%d originals, %d augmented)", mode.value, out_path, originals, augmented)
    return ManifestSummary(out_path, mode, originals, augmented)


# ---------------------------------------------------------------------------
# Converters (ImageNet-style class folders, SHIFT-style image/mask pairs)
# ---------------------------------------------------------------------------


def _images_in(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def convert_class_tree(
    root: str | Path,
    out_path: str | Path,
    task_text: str,
    name: str | None = None,
) -> ManifestSummary:
    """`<root>/<class_name>/<image>` -> manifest; class ids follow sorted folder names."""
    root = Path(root)
    out_path = Path(out_path)
    if not root.is_dir():
        raise MissingFile(root)

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ParseError(f"{root} has no class folders")

    rows: List[Dict[str, Any]] = [
        {
            "dataset": name or root.name,
            "task": TaskKind.CLASSIFICATION.value,
            "task_text": task_text,
            "class_count": len(class_dirs),
            "class_names": [d.name for d in class_dirs],
        }
    ]
    count = 0
    for label, class_dir in enumerate(class_dirs):
        for image in _images_in(class_dir):
            rows.append(
                {
                    "id": f"{class_dir.name}/{image.stem}",
                    "image": _rel(image, out_path.parent),
                    "label": label,
                }
            )
            count += 1

    _write_jsonl(out_path, rows)
    logger.info("Converted %s: %d images in %d classes", root, count, len(class_dirs))
    return ManifestSummary(out_path, ManifestMode.AUGMENTED_ONLY, count, 0)


def convert_paired_tree(
    images_dir: str | Path,
    masks_dir: str | Path,
    palette_path: str | Path,
    out_path: str | Path,
    task_text: str,
    name: str | None = None,
) -> ManifestSummary:
    """Pair `images/<stem>.*` with `masks/<stem>.png` for a segmentation manifest."""
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    out_path = Path(out_path)
    palette = load_palette(palette_path)
    if not images_dir.is_dir():
        raise MissingFile(images_dir)

    rows: List[Dict[str, Any]] = [
        {
            "dataset": name or images_dir.parent.name,
            "task": TaskKind.SEGMENTATION.value,
            "task_text": task_text,
            "class_count": max(palette) + 1,
            "palette": _rel(Path(palette_path), out_path.parent),
        }
    ]
    count = 0
    for image in _images_in(images_dir):
        mask = masks_dir / f"{image.stem}.png"
        if not mask.is_file():
            raise MissingFile(mask)
        rows.append(
            {
                "id": image.stem,
                "image": _rel(image, out_path.parent),
                "mask": _rel(mask, out_path.parent),
            }
        )
        count += 1

    _write_jsonl(out_path, rows)
    logger.info("Converted %s: %d image/mask pairs", images_dir, count)
    return ManifestSummary(out_path, ManifestMode.AUGMENTED_ONLY, count, 0)
