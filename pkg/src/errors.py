# src/errors.py
from __future__ import annotations

from typing import Any, Sequence


class DillemaError(RuntimeError):
    """Base class for every error raised by the pipeline."""


class ConfigError(DillemaError):
    pass


class InvariantViolation(DillemaError):
    pass


class OutOfOrderStage(DillemaError):
    pass


class ParseError(DillemaError):
    """
    A file or an LLM response did not match the expected grammar.

    `offset` is a byte offset for LLM responses, `line` a 1-based line number
    for manifests. `expected` names the token the parser wanted.
    """

    def __init__(
        self,
        reason: str,
        *,
        offset: int | None = None,
        line: int | None = None,
        expected: str | None = None,
    ) -> None:
        self.reason = reason
        self.offset = offset
        self.line = line
        self.expected = expected

        where = ""
        if line is not None:
            where = f"line {line}: "
        elif offset is not None:
            where = f"offset {offset}: "
        msg = f"{where}{reason}"
        if expected:
            msg += f" (expected {expected})"
        super().__init__(msg)


class MissingFile(DillemaError):
    def __init__(self, path: Any) -> None:
        self.path = str(path)
        super().__init__(f"File not found: {self.path}")


class LabelOutOfRange(DillemaError):
    def __init__(self, label: int, class_count: int, line: int | None = None) -> None:
        self.label = label
        self.class_count = class_count
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(
            f"{where}label {label} outside [0, {class_count}) for this dataset"
        )


class InsufficientClassSupport(DillemaError):
    def __init__(self, class_id: int, available: int, required: int) -> None:
        self.class_id = class_id
        self.available = available
        self.required = required
        super().__init__(
            f"class {class_id} has {available} entries, plan needs {required}"
        )


class UnknownClassId(DillemaError):
    def __init__(self, value: int, row: int, col: int) -> None:
        self.value = value
        self.row = row
        self.col = col
        super().__init__(
            f"segmentation value {value} at (row={row}, col={col}) has no palette entry"
        )


class WriteError(DillemaError):
    pass


class TemplateError(DillemaError):
    pass


class RetriesExhausted(DillemaError):
    def __init__(
        self,
        attempts: int,
        last_error: ParseError | None,
        transcript: Sequence[Any] = (),
    ) -> None:
        self.attempts = attempts
        self.last_error = last_error
        self.transcript = tuple(transcript)
        super().__init__(
            f"no parsable response after {attempts} attempts; last error: {last_error}"
        )


class BackendError(DillemaError):
    def __init__(self, role: str, message: str, status: int | None = None) -> None:
        self.role = role
        self.status = status
        prefix = f"{role} backend"
        if status is not None:
            prefix += f" (HTTP {status})"
        super().__init__(f"{prefix}: {message}")


class BackendTimeout(BackendError):
    pass


class DimensionMismatch(DillemaError):
    pass


class ShapeError(DillemaError):
    pass


class DecodeError(DillemaError):
    pass


class BadThresholds(DillemaError):
    pass


class LengthMismatch(DillemaError):
    pass


class ClassOutOfRange(DillemaError):
    pass


class RaggedGroups(DillemaError):
    pass


class SuiteMismatch(DillemaError):
    pass


class UnknownControlQuestion(DillemaError):
    pass


class AllDiscarded(DillemaError):
    pass
