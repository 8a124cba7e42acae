# src/consensus.py
"""
Human-study analysis: worker filtering, the 4-of-5 agreement rule and
validity rates.

Input CSV columns:
    worker_id, question_id, question_type, answer, is_control,
    approval_rate, completed_tasks
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple

import pandas as pd

from src.errors import (
    AllDiscarded,
    InvariantViolation,
    ParseError,
    UnknownControlQuestion,
    WriteError,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "worker_id",
    "question_id",
    "question_type",
    "answer",
    "is_control",
    "approval_rate",
    "completed_tasks",
)

MIN_APPROVAL = 0.95
MIN_TASKS = 50
AGREEMENT = 4
MAX_VOTES = 5

_TRUE = {"yes", "y", "true", "1", "1.0"}
_FALSE = {"no", "n", "false", "0", "0.0"}


class Answer(str, Enum):
    YES = "yes"
    NO = "no"

    @classmethod
    def parse(cls, value: Any) -> "Answer":
        text = str(value).strip().lower()
        if text in _TRUE:
            return cls.YES
        if text in _FALSE:
            return cls.NO
        raise ParseError(f"unrecognised answer {value!r}", expected="yes or no")


class Verdict(str, Enum):
    VALID = "valid"
    INVALID = "invalid"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class WorkerResponse:
    worker_id: str
    question_id: str
    answer: Answer
    question_type: str = ""
    is_control: bool = False
    approval_rate: float = 1.0
    completed_tasks: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.approval_rate <= 1.0:
            raise InvariantViolation(
                f"worker {self.worker_id} approval rate {self.approval_rate} is outside [0, 1]"
            )
        object.__setattr__(self, "answer", Answer(self.answer))


@dataclass(frozen=True)
class ConsensusOutcome:
    question_id: str
    verdict: Verdict
    yes: int
    no: int
    question_type: str = ""

    @property
    def vote_split(self) -> Tuple[int, int]:
        return (self.yes, self.no)


@dataclass(frozen=True)
class FilterResult:
    kept: Tuple[WorkerResponse, ...]
    discarded: Dict[str, Tuple[str, ...]] = field(default_factory=dict)  # worker -> reasons
    dropped_responses: int = 0

    @property
    def kept_answers(self) -> Tuple[WorkerResponse, ...]:
        """Kept responses to real (non-control) questions."""
        return tuple(r for r in self.kept if not r.is_control)


@dataclass(frozen=True)
class ValiditySummary:
    valid: int
    invalid: int
    discarded: int

    @property
    def scored(self) -> int:
        return self.valid + self.invalid

    @property
    def total(self) -> int:
        return self.scored + self.discarded

    @property
    def rate(self) -> Fraction:
        if self.scored == 0:
            raise AllDiscarded(f"all {self.discarded} questions were discarded")
        return Fraction(self.valid, self.scored)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _as_bool(value: Any, row: int) -> bool:
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE or text in ("", "nan"):
        return False
    raise ParseError(f"is_control must be true/false, got {value!r}", line=row)


def load_responses(path: str | Path) -> List[WorkerResponse]:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"worker_id": str, "question_id": str, "question_type": str})
    except FileNotFoundError as exc:
        raise ParseError(f"response file {path} does not exist") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc

    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise ParseError(f"{path} lacks columns: {', '.join(missing)}", line=1)

    df["question_type"] = df["question_type"].fillna("")
    responses: List[WorkerResponse] = []
    # line 1 is the header
    for row, rec in enumerate(df.to_dict(orient="records"), start=2):
        try:
            responses.append(
                WorkerResponse(
                    worker_id=str(rec["worker_id"]),
                    question_id=str(rec["question_id"]),
                    answer=Answer.parse(rec["answer"]),
                    question_type=str(rec["question_type"]),
                    is_control=_as_bool(rec["is_control"], row),
                    approval_rate=float(rec["approval_rate"]),
                    completed_tasks=int(rec["completed_tasks"]),
                )
            )
        except ParseError as exc:
            raise ParseError(exc.reason, line=row, expected=exc.expected) from exc
        except (InvariantViolation, ValueError, TypeError) as exc:
            raise ParseError(str(exc), line=row) from exc

    logger.info("Loaded %d responses from %s", len(responses), path)
    return responses


def load_control_key(path: str | Path) -> Dict[str, Answer]:
    """JSON object mapping control question id -> correct answer."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ParseError(f"control key {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"control key {path} is not JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ParseError(f"control key {path} must be a JSON object")
    return {str(k): Answer.parse(v) for k, v in raw.items()}


# ---------------------------------------------------------------------------
# Filtering and consensus
# ---------------------------------------------------------------------------


def filter_workers(
    responses: Sequence[WorkerResponse],
    min_approval: float = MIN_APPROVAL,
    min_tasks: int = MIN_TASKS,
    control_key: Mapping[str, Answer] | None = None,
) -> FilterResult:
    """
    Drop every response of a worker whose approval rate is not above
    `min_approval`, who completed fewer than `min_tasks` tasks, or who
    answered any control question wrongly.
    """
    control_key = {k: Answer(v) for k, v in (control_key or {}).items()}
    reasons: Dict[str, List[str]] = {}

    def flag(worker: str, reason: str) -> None:
        bucket = reasons.setdefault(worker, [])
        if reason not in bucket:
            bucket.append(reason)

    for r in responses:
        if r.approval_rate <= min_approval:
            flag(r.worker_id, "approval")
        if r.completed_tasks < min_tasks:
            flag(r.worker_id, "tasks")
        if r.is_control:
            if r.question_id not in control_key:
                raise UnknownControlQuestion(
                    f"control question {r.question_id!r} has no entry in the control key"
                )
            if r.answer is not control_key[r.question_id]:
                flag(r.worker_id, "control")

    kept = tuple(r for r in responses if r.worker_id not in reasons)
    dropped = len(responses) - len(kept)
    if reasons:
        logger.info(
            "Discarded %d workers (%d responses): %s",
            len(reasons), dropped,
            ", ".join(f"{w}={'+'.join(rs)}" for w, rs in sorted(reasons.items())),
        )
    return FilterResult(kept, {w: tuple(rs) for w, rs in reasons.items()}, dropped)


def consensus(
    question_id: str, votes: Sequence[Answer | str], question_type: str = ""
) -> ConsensusOutcome:
    """Valid with at least 4 yes, Invalid with at least 4 no, otherwise Discarded."""
    answers = [Answer(v) if not isinstance(v, Answer) else v for v in votes]
    if len(answers) > MAX_VOTES:
        raise InvariantViolation(
            f"question {question_id} has {len(answers)} votes, at most {MAX_VOTES} expected"
        )
    yes = sum(1 for a in answers if a is Answer.YES)
    no = len(answers) - yes
    if yes >= AGREEMENT:
        verdict = Verdict.VALID
    elif no >= AGREEMENT:
        verdict = Verdict.INVALID
    else:
        verdict = Verdict.DISCARDED
    return ConsensusOutcome(question_id, verdict, yes, no, question_type)


def consensus_all(responses: Iterable[WorkerResponse]) -> List[ConsensusOutcome]:
    """One outcome per non-control question, in first-seen order."""
    votes: Dict[str, List[Answer]] = {}
    types: Dict[str, str] = {}
    for r in responses:
        if r.is_control:
            continue
        votes.setdefault(r.question_id, []).append(r.answer)
        types.setdefault(r.question_id, r.question_type)
    return [consensus(q, v, types[q]) for q, v in votes.items()]


def validity_rate(outcomes: Sequence[ConsensusOutcome]) -> ValiditySummary:
    """Counts per verdict; `.rate` is valid / (valid + invalid)."""
    if not outcomes:
        raise AllDiscarded("no questions to score")
    summary = ValiditySummary(
        valid=sum(o.verdict is Verdict.VALID for o in outcomes),
        invalid=sum(o.verdict is Verdict.INVALID for o in outcomes),
        discarded=sum(o.verdict is Verdict.DISCARDED for o in outcomes),
    )
    summary.rate  # raises AllDiscarded
    return summary


def validity_by_type(outcomes: Sequence[ConsensusOutcome]) -> Dict[str, ValiditySummary]:
    """validity_rate per question_type; types with every question discarded are skipped."""
    by_type: Dict[str, List[ConsensusOutcome]] = {}
    for o in outcomes:
        by_type.setdefault(o.question_type, []).append(o)

    result: Dict[str, ValiditySummary] = {}
    for qtype, group in sorted(by_type.items()):
        try:
            result[qtype] = validity_rate(group)
        except AllDiscarded:
            logger.warning("Every %r question was discarded; no validity rate", qtype or "untyped")
    return result


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _summary_dict(summary: ValiditySummary) -> Dict[str, Any]:
    return {
        "valid": summary.valid,
        "invalid": summary.invalid,
        "discarded": summary.discarded,
        "rate": float(summary.rate),
    }


def consensus_report(
    outcomes: Sequence[ConsensusOutcome], filtered: FilterResult | None = None
) -> Dict[str, Any]:
    report: Dict[str, Any] = {
        "questions": len(outcomes),
        "overall": _summary_dict(validity_rate(outcomes)),
        "by_type": {t: _summary_dict(s) for t, s in validity_by_type(outcomes).items()},
    }
    if filtered is not None:
        report["responses_kept"] = len(filtered.kept_answers)
        report["responses_dropped"] = filtered.dropped_responses
        report["discarded_workers"] = {w: list(r) for w, r in sorted(filtered.discarded.items())}
    return report


def verdict_frame(outcomes: Sequence[ConsensusOutcome]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "question_id": o.question_id,
                "question_type": o.question_type,
                "verdict": o.verdict.value,
                "yes": o.yes,
                "no": o.no,
            }
            for o in outcomes
        ],
        columns=["question_id", "question_type", "verdict", "yes", "no"],
    )


def write_verdicts_csv(outcomes: Sequence[ConsensusOutcome], path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        verdict_frame(outcomes).to_csv(path, index=False)
    except OSError as exc:
        raise WriteError(f"could not write {path}: {exc}") from exc
    return path
