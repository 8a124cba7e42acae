# src/prompts.py
"""
Prompt templates for the three LLM stages, the response grammar, the
seed-rotating retry loop and edit selection.

Response grammar (one marker line, then a bracketed value):

    KEYWORDS: ["gray", "foggy"]
    ALTERNATIVES: {"foggy": ["rainy", "snowy"], "gray": ["red"]}
    CAPTION: "A red car driving down a snowy street."

Strings are double-quoted; the only escapes are \\" and \\\\. Anything else is
a ParseError, which the retry loop answers with a fresh seed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Protocol, Sequence, Tuple, Union

import numpy as np

from src.errors import (
    InvariantViolation,
    ParseError,
    RetriesExhausted,
    TemplateError,
)
from src.models import (
    AlternativeMap,
    Caption,
    CaptionSource,
    EditSelection,
    KeywordSet,
    Stage,
    TaskDescription,
    TaskKind,
    normalize_keyword,
    stable_seed,
)

logger = logging.getLogger(__name__)

_PROJECT_ROOT = Path(__file__).resolve().parents[1]
TEMPLATE_DIR = _PROJECT_ROOT / "config" / "templates"

PROMPT_STAGES: Tuple[Stage, ...] = (Stage.KEYWORDS, Stage.ALTERNATIVES, Stage.COUNTERFACTUAL)

REQUIRED_PLACEHOLDERS: Dict[Stage, frozenset[str]] = {
    Stage.KEYWORDS: frozenset({"TASK", "CAPTION"}),
    Stage.ALTERNATIVES: frozenset({"TASK", "CAPTION", "KEYWORDS"}),
    Stage.COUNTERFACTUAL: frozenset({"TASK", "CAPTION", "ALTERNATIVES"}),
}

MARKERS: Dict[Stage, str] = {
    Stage.KEYWORDS: "KEYWORDS:",
    Stage.ALTERNATIVES: "ALTERNATIVES:",
    Stage.COUNTERFACTUAL: "CAPTION:",
}

FORMAT_INSTRUCTIONS: Dict[Stage, str] = {
    Stage.KEYWORDS: (
        'Answer with one line of the form KEYWORDS: ["keyword", ...] listing '
        "words or short phrases copied from the caption."
    ),
    Stage.ALTERNATIVES: (
        'Answer with one line of the form ALTERNATIVES: {"keyword": '
        '["alternative", ...], ...} using exactly the keywords listed above.'
    ),
    Stage.COUNTERFACTUAL: (
        'Answer with one line of the form CAPTION: "new caption". Escape double '
        "quotes inside the caption with a backslash."
    ),
}

EXAMPLE_INTRO = "Here is an example of a request and the expected answer."
REQUEST_INTRO = "Now answer the following request."

_PLACEHOLDER = re.compile(r"\{\{([A-Z_]+)\}\}")

Payload = Union[KeywordSet, AlternativeMap, Caption]


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    body: str
    example_fill: Tuple[Tuple[str, str], ...]
    example_output: str
    digest: str = ""

    def example_values(self) -> Dict[str, str]:
        return dict(self.example_fill)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 8
    base_seed: int = 0
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise InvariantViolation("max_attempts must be at least 1")


@dataclass(frozen=True)
class Attempt:
    index: int
    seed: int
    response: str
    error: str | None = None


@dataclass(frozen=True)
class RetryOutcome:
    payload: Payload
    attempts_used: int
    transcript: Tuple[Attempt, ...]


class CompletionBackend(Protocol):
    def complete(self, prompt: str, seed: int, temperature: float) -> str: ...


def _placeholders(text: str) -> set[str]:
    return set(_PLACEHOLDER.findall(text))


def validate_template(template: PromptTemplate) -> PromptTemplate:
    if template.stage not in PROMPT_STAGES:
        raise TemplateError(f"no prompt stage {template.stage!r}")

    required = REQUIRED_PLACEHOLDERS[template.stage]
    found = _placeholders(template.body)
    if found != required:
        missing = sorted(required - found)
        extra = sorted(found - required)
        raise TemplateError(
            f"{template.stage.value} template placeholders wrong "
            f"(missing {missing}, unexpected {extra})"
        )

    fill = template.example_values()
    if set(fill) != required:
        raise TemplateError(
            f"{template.stage.value} example must fill exactly {sorted(required)}"
        )

    try:
        parse_stage_response(template.stage, template.example_output)
    except ParseError as exc:
        raise TemplateError(
            f"{template.stage.value} example output does not parse: {exc}"
        ) from exc
    return template


def parse_template_text(text: str, stage: Stage) -> PromptTemplate:
    """
    Template files have three sections:

        ### PROMPT
        ...body with {{TASK}}-style placeholders...
        ### EXAMPLE
        TASK: ...
        CAPTION: ...
        ### EXAMPLE OUTPUT
        KEYWORDS: [...]
    """
    sections: Dict[str, List[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        if line.startswith("### "):
            current = line[4:].strip().upper()
            sections[current] = []
        elif current is not None:
            sections[current].append(line)

    for name in ("PROMPT", "EXAMPLE", "EXAMPLE OUTPUT"):
        if name not in sections:
            raise TemplateError(f"{stage.value} template lacks a '### {name}' section")

    fill: List[Tuple[str, str]] = []
    for line in sections["EXAMPLE"]:
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise TemplateError(f"example line {line!r} is not 'NAME: value'")
        fill.append((key.strip(), value.strip()))

    template = PromptTemplate(
        stage=stage,
        body="\n".join(sections["PROMPT"]).strip(),
        example_fill=tuple(fill),
        example_output="\n".join(sections["EXAMPLE OUTPUT"]).strip(),
        digest=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )
    return validate_template(template)


def load_template(path: str | Path, stage: Stage) -> PromptTemplate:
    path = Path(path)
    if not path.is_file():
        raise TemplateError(f"template file not found: {path}")
    return parse_template_text(path.read_text(encoding="utf-8"), stage)


_CACHE: Dict[Tuple[str, str], Dict[Stage, PromptTemplate]] = {}


def load_templates(
    kind: TaskKind, template_dir: str | Path | None = None
) -> Dict[Stage, PromptTemplate]:
    """Load `<template_dir>/<kind>/<stage>.txt` for the three prompt stages."""
    base = Path(template_dir) if template_dir else TEMPLATE_DIR
    key = (str(base.resolve()), TaskKind(kind).value)
    if key in _CACHE:
        return _CACHE[key]

    folder = base / TaskKind(kind).value
    templates = {
        stage: load_template(folder / f"{stage.value}.txt", stage) for stage in PROMPT_STAGES
    }
    _CACHE[key] = templates
    return templates


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def format_keywords(keywords: Sequence[str]) -> str:
    return json.dumps(list(keywords), ensure_ascii=False)


def format_edits(pairs: Sequence[Tuple[str, str]]) -> str:
    return ", ".join(
        f"{json.dumps(k, ensure_ascii=False)} -> {json.dumps(a, ensure_ascii=False)}"
        for k, a in pairs
    )


def _substitute(body: str, values: Dict[str, str]) -> str:
    def repl(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"no value for placeholder {{{{{name}}}}}")
        return values[name]

    return _PLACEHOLDER.sub(repl, body)


def _example_values(template: PromptTemplate) -> Dict[str, str]:
    values = template.example_values()
    # list-valued example fills are JSON so they render like real requests
    if "KEYWORDS" in values:
        values["KEYWORDS"] = format_keywords(json.loads(values["KEYWORDS"]))
    if "ALTERNATIVES" in values:
        values["ALTERNATIVES"] = format_edits(list(json.loads(values["ALTERNATIVES"]).items()))
    return values


def _render(template: PromptTemplate, values: Dict[str, str]) -> str:
    try:
        example = _substitute(template.body, _example_values(template))
    except (json.JSONDecodeError, AttributeError) as exc:
        raise TemplateError(f"{template.stage.value} example fill is not valid JSON: {exc}") from exc

    return "\n\n".join(
        [
            EXAMPLE_INTRO,
            example,
            template.example_output,
            REQUEST_INTRO,
            _substitute(template.body, values),
            FORMAT_INSTRUCTIONS[template.stage],
        ]
    )


def _require_stage(template: PromptTemplate, stage: Stage) -> None:
    if template.stage is not stage:
        raise TemplateError(
            f"expected a {stage.value} template, got {template.stage.value}"
        )


def _caption_text(caption: Caption | str) -> str:
    text = caption.text if isinstance(caption, Caption) else str(caption or "")
    if not text.strip():
        raise TemplateError("caption is empty")
    return text


def render_keywords_prompt(
    task: TaskDescription, caption: Caption | str, template: PromptTemplate
) -> str:
    _require_stage(template, Stage.KEYWORDS)
    return _render(template, {"TASK": task.text, "CAPTION": _caption_text(caption)})


def render_alternatives_prompt(
    task: TaskDescription,
    caption: Caption | str,
    keywords: KeywordSet | Sequence[str],
    template: PromptTemplate,
) -> str:
    _require_stage(template, Stage.ALTERNATIVES)
    words = keywords.keywords if isinstance(keywords, KeywordSet) else tuple(keywords)
    if not words:
        raise TemplateError("keyword set is empty")
    return _render(
        template,
        {"TASK": task.text, "CAPTION": _caption_text(caption), "KEYWORDS": format_keywords(words)},
    )


def render_counterfactual_prompt(
    task: TaskDescription,
    caption: Caption | str,
    edits: EditSelection,
    template: PromptTemplate,
) -> str:
    _require_stage(template, Stage.COUNTERFACTUAL)
    if len(edits) == 0:
        raise TemplateError("counterfactual prompt needs at least one edit")
    return _render(
        template,
        {
            "TASK": task.text,
            "CAPTION": _caption_text(caption),
            "ALTERNATIVES": format_edits(edits.applied),
        },
    )


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _utf8_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8", "surrogatepass"))


class _Scanner:
    """Strict recursive-descent reader for the bracketed values."""

    def __init__(self, text: str, pos: int) -> None:
        self.text = text
        self.pos = pos

    def error(self, reason: str, expected: str) -> ParseError:
        offset = _utf8_offset(self.text, self.pos)
        return ParseError(reason, offset=offset, expected=expected)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r\n":
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, char: str) -> None:
        if self.peek() != char:
            found = repr(self.peek()) if self.peek() else "end of text"
            raise self.error(f"found {found}", repr(char))
        self.pos += 1

    def string(self) -> str:
        self.expect('"')
        out: List[str] = []
        while True:
            ch = self.peek()
            if not ch or ch == "\n":
                raise self.error("unterminated string", '"')
            self.pos += 1
            if ch == '"':
                return "".join(out)
            if ch == "\\":
                nxt = self.peek()
                if nxt not in ('"', "\\"):
                    raise self.error("unsupported escape", '\\" or \\\\')
                out.append(nxt)
                self.pos += 1
            else:
                out.append(ch)

    def string_array(self) -> List[str]:
        self.expect("[")
        items: List[str] = []
        self.skip_ws()
        if self.peek() == "]":
            self.pos += 1
            return items
        while True:
            self.skip_ws()
            items.append(self.string())
            self.skip_ws()
            if self.peek() == ",":
                self.pos += 1
                continue
            self.expect("]")
            return items

    def object_of_arrays(self) -> List[Tuple[str, List[str]]]:
        self.expect("{")
        pairs: List[Tuple[str, List[str]]] = []
        self.skip_ws()
        if self.peek() == "}":
            self.pos += 1
            return pairs
        while True:
            self.skip_ws()
            key = self.string()
            self.skip_ws()
            self.expect(":")
            self.skip_ws()
            pairs.append((key, self.string_array()))
            self.skip_ws()
            if self.peek() == ",":
                self.pos += 1
                continue
            self.expect("}")
            return pairs


def _decode(raw_text: Any) -> str:
    if isinstance(raw_text, (bytes, bytearray)):
        try:
            return bytes(raw_text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("response is not UTF-8", offset=exc.start, expected="UTF-8 text") from exc
    if not isinstance(raw_text, str):
        raise ParseError(f"response is {type(raw_text).__name__}, not text", offset=0, expected="text")
    try:
        raw_text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise ParseError(
            "response holds a lone surrogate", offset=_utf8_offset(raw_text, exc.start), expected="UTF-8 text"
        ) from exc
    return raw_text


def parse_stage_response(
    stage: Stage,
    raw_text: str | bytes,
    *,
    keywords: KeywordSet | None = None,
    original: Caption | None = None,
) -> Payload:
    """
    Turn an LLM response into the stage payload, or raise ParseError.

    `keywords` rejects alternative keys the keyword step never produced;
    `original` rejects a counterfactual identical to the source caption.
    """
    if stage not in MARKERS:
        raise ParseError(f"no grammar for stage {stage!r}", offset=0)
    text = _decode(raw_text)
    marker = MARKERS[stage]

    found = re.search(rf"(?m)^[ \t]*{re.escape(marker)}", text)
    if found is None:
        raise ParseError("no marker line", offset=0, expected=marker)

    scanner = _Scanner(text, found.end())
    scanner.skip_ws()
    value_start = scanner.pos

    try:
        if stage is Stage.KEYWORDS:
            words = scanner.string_array()
            if not words:
                raise scanner.error("keyword list is empty", "at least one keyword")
            payload: Payload = KeywordSet(tuple(words))
        elif stage is Stage.ALTERNATIVES:
            pairs = scanner.object_of_arrays()
            if not pairs:
                raise scanner.error("alternative map is empty", "at least one keyword")
            payload = AlternativeMap(tuple((k, tuple(v)) for k, v in pairs))
            if keywords is not None:
                for key in payload.keys():
                    if key not in keywords:
                        raise ParseError(
                            f"alternatives for unknown keyword {key!r}",
                            offset=_utf8_offset(text, value_start),
                            expected=format_keywords(keywords.keywords),
                        )
        else:
            sentence = scanner.string()
            payload = Caption.from_text(sentence, CaptionSource.COUNTERFACTUAL)
            if original is not None and normalize_keyword(payload.text) == normalize_keyword(original.text):
                raise ParseError(
                    "counterfactual repeats the original caption",
                    offset=_utf8_offset(text, value_start),
                    expected="a modified caption",
                )
    except InvariantViolation as exc:
        raise ParseError(
            str(exc), offset=_utf8_offset(text, value_start), expected="a valid value"
        ) from exc

    return payload


# ---------------------------------------------------------------------------
# Retry loop
# ---------------------------------------------------------------------------


def run_with_retry(
    request_builder: Callable[[int], str] | str,
    policy: RetryPolicy,
    llm_backend: CompletionBackend,
    stage: Stage,
    **parse_context: Any,
) -> RetryOutcome:
    """
    Ask the LLM until a response parses. Attempt i uses
    seed = stable_seed(policy.base_seed, i). Backend errors are not retried.
    """
    transcript: List[Attempt] = []
    last_error: ParseError | None = None

    for index in range(policy.max_attempts):
        seed = stable_seed(policy.base_seed, index)
        prompt = request_builder(index) if callable(request_builder) else request_builder
        raw = llm_backend.complete(prompt, seed, policy.temperature)

        try:
            payload = parse_stage_response(stage, raw, **parse_context)
        except ParseError as exc:
            logger.debug("%s attempt %d (seed %d) unparsable: %s", stage.value, index + 1, seed, exc)
            transcript.append(Attempt(index, seed, raw, str(exc)))
            last_error = exc
            continue

        transcript.append(Attempt(index, seed, raw))
        return RetryOutcome(payload, index + 1, tuple(transcript))

    raise RetriesExhausted(policy.max_attempts, last_error, transcript)


# ---------------------------------------------------------------------------
# Edit selection
# ---------------------------------------------------------------------------


def select_edits(alternatives: AlternativeMap, budget: int | None, seed: int) -> EditSelection:
    """
    Choose min(budget, |alternatives|) distinct keywords uniformly, then one
    alternative per keyword uniformly. budget=None applies every keyword.
    """
    if budget is not None and budget < 0:
        raise InvariantViolation(f"negative edit budget {budget}")

    n = len(alternatives)
    k = n if budget is None else min(budget, n)
    if k == 0:
        return EditSelection((), budget)

    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
    applied = []
    for i in chosen:
        keyword, options = alternatives.entries[i]
        applied.append((keyword, options[int(rng.integers(len(options)))]))
    return EditSelection(tuple(applied), budget)


def detect_applied_edits(edits: EditSelection, counterfactual: Caption) -> Tuple[str, ...]:
    """Keywords whose chosen alternative shows up in the counterfactual caption."""
    text = normalize_keyword(counterfactual.text)
    found = []
    for keyword, alternative in edits.applied:
        pattern = r"(?<!\w)" + re.escape(normalize_keyword(alternative)) + r"(?!\w)"
        if re.search(pattern, text):
            found.append(keyword)
    return tuple(found)
