# src/evaluation.py
"""
Scoring of model predictions on original and augmented suites.

Reports keep the raw per-case outcomes; every aggregate (accuracy, mIoU,
confusion matrix, histograms) is recomputed from them. Counts are integers
and ratios are Fractions until the final conversion for display.
"""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import (
    ClassOutOfRange,
    LengthMismatch,
    ParseError,
    RaggedGroups,
    ShapeError,
    SuiteMismatch,
    WriteError,
)
from src.models import SCHEMA_VERSION, TaskKind

logger = logging.getLogger(__name__)

# a segmentation case counts as correct when its own mIoU reaches this
SEGMENTATION_PASS = Fraction(1, 2)
MIOU_CLASSES = "present-in-gt-or-pred"


def _as_int_array(values: Any) -> np.ndarray:
    array = np.asarray(values)
    if array.size and not np.issubdtype(array.dtype, np.integer):
        if not np.all(np.equal(np.mod(array, 1), 0)):
            raise ClassOutOfRange("class ids must be integers")
    return array.astype(np.int64)


def _check_range(array: np.ndarray, class_count: int, what: str) -> None:
    if array.size and (array.min() < 0 or array.max() >= class_count):
        bad = int(array[(array < 0) | (array >= class_count)].flat[0])
        raise ClassOutOfRange(f"{what} contains class {bad}, outside 0..{class_count - 1}")


# ---------------------------------------------------------------------------
# Confusion matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes."""

    counts: np.ndarray
    class_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ShapeError("confusion matrix has negative counts")
        names = tuple(self.class_names) or tuple(str(i) for i in range(counts.shape[0]))
        if len(names) != counts.shape[0]:
            raise ShapeError(f"{len(names)} class names for {counts.shape[0]} classes")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", names)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts) and self.class_names == other.class_names

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ShapeError("cannot add confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def accuracy(self) -> Fraction:
        if self.total == 0:
            raise LengthMismatch("confusion matrix is empty")
        return Fraction(int(np.trace(self.counts)), self.total)

    def recall(self) -> Dict[int, Fraction]:
        """Per-class recall for every class with ground-truth support."""
        return {
            c: Fraction(int(self.counts[c, c]), int(s))
            for c, s in enumerate(self.support)
            if s > 0
        }

    def iou(self) -> Dict[int, Fraction]:
        """IoU per class present in ground truth or prediction."""
        diag = np.diag(self.counts)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - diag
        return {c: Fraction(int(diag[c]), int(u)) for c, u in enumerate(union) if u > 0}


def confusion(
    preds: Any,
    gts: Any,
    class_count: int,
    class_names: Sequence[str] = (),
) -> ConfusionMatrix:
    """counts[i][j] = number of units with ground truth i predicted as j."""
    pred = _as_int_array(preds)
    gt = _as_int_array(gts)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{pred.shape} predictions for {gt.shape} ground-truth values")
    _check_range(pred, class_count, "predictions")
    _check_range(gt, class_count, "ground truth")

    flat = class_count * gt.ravel() + pred.ravel()
    counts = np.bincount(flat, minlength=class_count**2).reshape(class_count, class_count)
    return ConfusionMatrix(counts, tuple(class_names))


def row_normalize(matrix: ConfusionMatrix) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Row-stochastic view of the counts. Rows without support stay all-zero and
    their class ids are returned as the second element.
    """
    support = matrix.support
    normalized = np.zeros(matrix.counts.shape, dtype=np.float64)
    nonzero = support > 0
    normalized[nonzero] = matrix.counts[nonzero] / support[nonzero, None]
    empty = tuple(int(c) for c in np.flatnonzero(~nonzero))
    return normalized, empty


def accuracy(predictions: Sequence[Any], labels: Sequence[Any]) -> Fraction:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise LengthMismatch("accuracy of an empty suite is undefined")
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    return Fraction(correct, len(labels))


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


def iou_per_class(pred_map: Any, gt_map: Any, class_count: int) -> Dict[int, Fraction]:
    pred = _as_int_array(pred_map)
    gt = _as_int_array(gt_map)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction is {pred.shape}, ground truth is {gt.shape}")
    return confusion(pred, gt, class_count).iou()


def mean_iou(
    pred_map: Any, gt_map: Any, class_count: int, *, exact: bool = False
) -> float | Fraction:
    """Mean IoU over classes present in either map; classes absent from both are skipped."""
    return _mean(iou_per_class(pred_map, gt_map, class_count), exact)


def _mean(values: Mapping[int, Fraction], exact: bool) -> float | Fraction:
    if not values:
        raise LengthMismatch("no class present in prediction or ground truth")
    result = sum(values.values(), Fraction(0)) / len(values)
    return result if exact else float(result)


# ---------------------------------------------------------------------------
# Per-case outcomes and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseOutcome:
    case_id: str
    augmentation_index: int | None
    correct: bool
    prediction: int | None = None  # classification only
    label: int | None = None
    counts: Tuple[Tuple[int, ...], ...] | None = None  # per-case pixel confusion (segmentation)
    origin_id: str | None = None

    @property
    def group_id(self) -> str:
        """The original image an outcome belongs to."""
        return self.origin_id or self.case_id


def score_classification(
    case_id: str,
    prediction: int,
    label: int,
    augmentation_index: int | None = None,
    origin_id: str | None = None,
) -> CaseOutcome:
    return CaseOutcome(
        case_id, augmentation_index, int(prediction) == int(label),
        prediction=int(prediction), label=int(label), origin_id=origin_id,
    )


def score_segmentation(
    case_id: str,
    pred_map: np.ndarray,
    gt_map: np.ndarray,
    class_count: int,
    augmentation_index: int | None = None,
    origin_id: str | None = None,
) -> CaseOutcome:
    if np.shape(pred_map) != np.shape(gt_map):
        raise ShapeError(f"prediction is {np.shape(pred_map)}, ground truth is {np.shape(gt_map)}")
    matrix = confusion(pred_map, gt_map, class_count)
    passed = _mean(matrix.iou(), exact=True) >= SEGMENTATION_PASS
    return CaseOutcome(
        case_id, augmentation_index, bool(passed),
        counts=tuple(tuple(int(v) for v in row) for row in matrix.counts),
        origin_id=origin_id,
    )


@dataclass(frozen=True)
class EvaluationReport:
    suite_name: str
    task: TaskKind
    class_names: Tuple[str, ...]
    outcomes: Tuple[CaseOutcome, ...]
    model: str = ""
    failures: Tuple[Tuple[str, str], ...] = ()  # (case id, error) for unscored cases

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", TaskKind(self.task))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "failures", tuple(tuple(f) for f in self.failures))

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def case_ids(self) -> Tuple[str, ...]:
        return tuple(o.case_id for o in self.outcomes)

    def confusion(self) -> ConfusionMatrix:
        n = self.class_count
        if self.task is TaskKind.CLASSIFICATION:
            labels = [o.label for o in self.outcomes]
            preds = [o.prediction for o in self.outcomes]
            return confusion(preds, labels, n, self.class_names)
        total = np.zeros((n, n), dtype=np.int64)
        for outcome in self.outcomes:
            total += np.asarray(outcome.counts, dtype=np.int64)
        return ConfusionMatrix(total, self.class_names)

    def accuracy(self) -> Fraction:
        """Fraction of cases scored correct."""
        if not self.outcomes:
            raise LengthMismatch(f"report {self.suite_name!r} has no scored cases")
        return Fraction(sum(o.correct for o in self.outcomes), len(self.outcomes))

    def mean_iou(self, exact: bool = False) -> float | Fraction:
        return _mean(self.confusion().iou(), exact)

    def metric(self) -> Fraction:
        """Headline metric: accuracy for classification, pixel mIoU for segmentation."""
        if self.task is TaskKind.CLASSIFICATION:
            return self.accuracy()
        return self.mean_iou(exact=True)

    @property
    def metric_name(self) -> str:
        return "accuracy" if self.task is TaskKind.CLASSIFICATION else "mIoU"

    def error_rate(self) -> Fraction:
        return 1 - self.metric()


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EffectivenessComparison:
    original_error: float
    augmented_error: float
    ratio: float | None  # None when the original suite has no errors
    validity_rate: float | None = None
    validity_adjusted_error: float | None = None
    models: Tuple[str, ...] = ()

    @property
    def ratio_undefined(self) -> bool:
        return self.ratio is None


def _fraction(value: Any, what: str) -> Fraction:
    frac = Fraction(value).limit_denominator(10**12) if isinstance(value, float) else Fraction(value)
    if not 0 <= frac <= 1:
        raise LengthMismatch(f"{what} must be a fraction in [0, 1], got {value}")
    return frac


def compare_errors(
    original_error: Any,
    augmented_error: Any,
    validity_rate: Any | None = None,
    models: Sequence[str] = (),
) -> EffectivenessComparison:
    orig = _fraction(original_error, "original error")
    aug = _fraction(augmented_error, "augmented error")
    ratio = float(aug / orig) if orig else None
    if ratio is None:
        logger.warning("Original suite has no errors; effectiveness ratio is undefined")

    adjusted = None
    if validity_rate is not None:
        validity = _fraction(validity_rate, "validity rate")
        adjusted = float(aug * validity)
        validity_rate = float(validity)
    return EffectivenessComparison(float(orig), float(aug), ratio, validity_rate, adjusted, tuple(models))


def compare_effectiveness(
    original: EvaluationReport,
    augmented: EvaluationReport,
    validity_rate: float | None = None,
) -> EffectivenessComparison:
    if original.model and augmented.model and original.model != augmented.model:
        logger.warning(
            "Comparing reports of different models (%s vs %s)", original.model, augmented.model
        )
    return compare_errors(
        original.error_rate(),
        augmented.error_rate(),
        validity_rate,
        models=tuple(dict.fromkeys(m for m in (original.model, augmented.model) if m)),
    )


def average_effectiveness(
    comparisons: Sequence[EffectivenessComparison],
    validity_rate: float | None = None,
) -> EffectivenessComparison:
    """Average the error rates of several models before validity normalization."""
    if not comparisons:
        raise LengthMismatch("no comparisons to average")
    n = len(comparisons)
    orig = sum(Fraction(c.original_error).limit_denominator(10**12) for c in comparisons) / n
    aug = sum(Fraction(c.augmented_error).limit_denominator(10**12) for c in comparisons) / n
    models = tuple(m for c in comparisons for m in c.models)
    return compare_errors(orig, aug, validity_rate, models)


@dataclass(frozen=True)
class ClassDegradation:
    class_id: int
    class_name: str
    before: float
    after: float

    @property
    def drop(self) -> float:
        return self.before - self.after


def class_degradation(
    original: EvaluationReport, augmented: EvaluationReport
) -> List[ClassDegradation]:
    """Per-class recall (normalized confusion diagonal), largest drop first."""
    if original.class_names != augmented.class_names:
        raise SuiteMismatch("reports use different class lists")
    before = original.confusion().recall()
    after = augmented.confusion().recall()
    rows = [
        ClassDegradation(c, original.class_names[c], float(before[c]), float(after[c]))
        for c in sorted(before.keys() & after.keys())
    ]
    return sorted(rows, key=lambda r: (-r.drop, r.class_id))


@dataclass(frozen=True)
class FailureHistogram:
    images: int
    augmentations_per_image: int
    distribution: Dict[int, Fraction]  # k failing augmentations -> share of images

    @property
    def fraction_all_fail(self) -> Fraction:
        return self.distribution.get(self.augmentations_per_image, Fraction(0))

    @property
    def fraction_none_fail(self) -> Fraction:
        return self.distribution.get(0, Fraction(0))


def failure_histogram(groups: Mapping[str, Sequence[bool]]) -> FailureHistogram:
    """
    `groups` maps an original image to the correctness of each of its
    augmentations. Every image must have the same augmentation count.
    """
    if not groups:
        raise RaggedGroups("no image groups given")
    sizes = {len(v) for v in groups.values()}
    if len(sizes) != 1:
        raise RaggedGroups(f"images have differing augmentation counts: {sorted(sizes)}")
    n = sizes.pop()
    if n == 0:
        raise RaggedGroups("images have no augmentations")

    failing = Counter(sum(1 for ok in outcomes if not ok) for outcomes in groups.values())
    total = len(groups)
    distribution = {k: Fraction(failing.get(k, 0), total) for k in range(n + 1)}
    return FailureHistogram(total, n, distribution)


def group_outcomes(report: EvaluationReport) -> Dict[str, List[bool]]:
    """Correctness of augmented cases grouped by their original image."""
    groups: Dict[str, List[bool]] = defaultdict(list)
    for outcome in sorted(
        report.outcomes, key=lambda o: (o.group_id, o.augmentation_index or 0)
    ):
        if outcome.augmentation_index is not None:
            groups[outcome.group_id].append(outcome.correct)
    return dict(groups)


@dataclass(frozen=True)
class MetricDelta:
    before: float
    after: float

    @property
    def absolute(self) -> float:
        return self.after - self.before

    @property
    def relative(self) -> float | None:
        """Change relative to the before value."""
        return None if self.before == 0 else self.absolute / self.before


@dataclass(frozen=True)
class RetrainingDelta:
    metric_name: str
    metric: MetricDelta
    error_rate: MetricDelta
    per_class_recall: Dict[str, MetricDelta] = field(default_factory=dict)


def metric_delta(before: float, after: float) -> MetricDelta:
    return MetricDelta(float(before), float(after))


def retraining_delta(before: EvaluationReport, after: EvaluationReport) -> RetrainingDelta:
    """Before/after comparison of the same suite scored by two model versions."""
    if before.suite_name != after.suite_name or before.task is not after.task:
        raise SuiteMismatch(f"suites differ: {before.suite_name!r} vs {after.suite_name!r}")
    if sorted(before.case_ids) != sorted(after.case_ids):
        raise SuiteMismatch(f"suite {before.suite_name!r} was scored on different cases")
    if before.class_names != after.class_names:
        raise SuiteMismatch("reports use different class lists")

    recall_before = before.confusion().recall()
    recall_after = after.confusion().recall()
    per_class = {
        before.class_names[c]: metric_delta(recall_before[c], recall_after[c])
        for c in sorted(recall_before.keys() & recall_after.keys())
    }
    return RetrainingDelta(
        before.metric_name,
        metric_delta(before.metric(), after.metric()),
        metric_delta(before.error_rate(), after.error_rate()),
        per_class,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def outcome_to_dict(outcome: CaseOutcome) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "case_id": outcome.case_id,
        "augmentation_index": outcome.augmentation_index,
        "correct": outcome.correct,
    }
    if outcome.origin_id is not None:
        data["origin_id"] = outcome.origin_id
    if outcome.counts is not None:
        data["counts"] = [list(row) for row in outcome.counts]
    else:
        data["prediction"] = outcome.prediction
        data["label"] = outcome.label
    return data


def outcome_from_dict(data: Mapping[str, Any]) -> CaseOutcome:
    counts = data.get("counts")
    return CaseOutcome(
        case_id=str(data["case_id"]),
        augmentation_index=data.get("augmentation_index"),
        correct=bool(data["correct"]),
        prediction=data.get("prediction"),
        label=data.get("label"),
        counts=tuple(tuple(int(v) for v in row) for row in counts) if counts is not None else None,
        origin_id=data.get("origin_id"),
    )


def report_to_dict(report: EvaluationReport) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "suite_name": report.suite_name,
        "task": report.task.value,
        "model": report.model,
        "class_names": list(report.class_names),
        "outcomes": [outcome_to_dict(o) for o in report.outcomes],
        "failures": [list(f) for f in report.failures],
        "metadata": {"miou_classes": MIOU_CLASSES},
    }
    # aggregates are informational; load_report recomputes them
    if report.outcomes:
        data["metric_name"] = report.metric_name
        data["metric"] = float(report.metric())
        data["error_rate"] = float(report.error_rate())
        data["confusion"] = report.confusion().counts.tolist()
    return data


def report_from_dict(data: Mapping[str, Any]) -> EvaluationReport:
    try:
        return EvaluationReport(
            suite_name=str(data["suite_name"]),
            task=TaskKind(data["task"]),
            class_names=tuple(data["class_names"]),
            outcomes=tuple(outcome_from_dict(o) for o in data["outcomes"]),
            model=str(data.get("model", "")),
            failures=tuple(tuple(f) for f in data.get("failures", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed evaluation report: {exc}") from exc


def save_report(report: EvaluationReport, path: str | Path) -> Path:
    return write_json(report_to_dict(report), path)


def load_report(path: str | Path) -> EvaluationReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ParseError(f"report {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"report {path} is not JSON: {exc.msg}", line=exc.lineno) from exc
    return report_from_dict(data)


def write_json(data: Any, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    except OSError as exc:
        raise WriteError(f"could not write {path}: {exc}") from exc
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, Fraction):
        return float(value)
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def confusion_frame(report: EvaluationReport) -> pd.DataFrame:
    """Row-normalized confusion matrix labelled with class names."""
    normalized, _ = row_normalize(report.confusion())
    names = list(report.class_names)
    frame = pd.DataFrame(normalized, index=names, columns=names)
    frame.index.name = "ground truth"
    frame.columns.name = "predicted"
    return frame


def per_class_frame(report: EvaluationReport) -> pd.DataFrame:
    matrix = report.confusion()
    recall = matrix.recall()
    iou = matrix.iou()
    rows = []
    for c, name in enumerate(report.class_names):
        rows.append(
            {
                "class": name,
                "support": int(matrix.support[c]),
                "recall": float(recall[c]) if c in recall else None,
                "IoU": float(iou[c]) if c in iou else None,
            }
        )
    return pd.DataFrame(rows).set_index("class")


def summary_frame(reports: Iterable[EvaluationReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        rows.append(
            {
                "suite": report.suite_name,
                "model": report.model,
                "cases": len(report.outcomes),
                "failed": len(report.failures),
                "metric": report.metric_name,
                "value": float(report.metric()),
                "error rate": float(report.error_rate()),
            }
        )
    return pd.DataFrame(rows)


def render_report(report: EvaluationReport) -> str:
    """Plain-text tables; percentages at one decimal for display only."""
    pct = lambda v: "" if pd.isna(v) else f"{100 * v:.1f}%"  # noqa: E731
    parts = [
        summary_frame([report]).to_string(index=False, formatters={"value": pct, "error rate": pct}),
        "",
        per_class_frame(report).to_string(formatters={"recall": pct, "IoU": pct}),
        "",
        confusion_frame(report).to_string(float_format=lambda v: f"{100 * v:.1f}"),
    ]
    return "\n".join(parts)


def write_confusion_csv(report: EvaluationReport, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        confusion_frame(report).to_csv(path)
    except OSError as exc:
        raise WriteError(f"could not write {path}: {exc}") from exc
    return path
