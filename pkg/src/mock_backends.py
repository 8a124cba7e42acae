# src/mock_backends.py
"""
Deterministic stand-ins for the captioner, LLM, generator and model.

They sit behind a requests transport adapter mounted on `mock://`, so a run
against mocks goes through the same JSON wire path, retry loop and replay
cache as a run against real services.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple
from urllib.parse import urlparse

import numpy as np
import requests
from requests.adapters import HTTPAdapter
from urllib3 import HTTPResponse

from src.conditioning import to_grayscale
from src.errors import DillemaError
from src.images import decode_b64, encode_b64, image_digest
from src.models import Caption, CaptionSource, stable_seed
from src.prompts import FORMAT_INSTRUCTIONS, REQUEST_INTRO, Stage

logger = logging.getLogger(__name__)

MOCK_SCHEME = "mock://"

COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (200, 40, 40),
    "orange": (230, 140, 30),
    "yellow": (230, 210, 50),
    "green": (50, 160, 60),
    "blue": (40, 70, 200),
    "purple": (130, 50, 160),
    "brown": (120, 80, 40),
    "gray": (128, 128, 128),
    "white": (240, 240, 240),
    "black": (20, 20, 20),
}
WEATHER = ("sunny", "cloudy", "foggy", "rainy", "snowy")
TEXTURES = ("plain", "textured", "striped", "dotted")

VOCABULARY: Tuple[Tuple[str, ...], ...] = (tuple(COLORS), WEATHER, TEXTURES)

REFUSAL = "I'm sorry, but I can't help with that request."

_CAPTION_IN_REQUEST = re.compile(r'the caption "(.*?)"(?=,| by)', re.S)
_KEYWORDS_IN_REQUEST = re.compile(r"these keywords (\[.*?\])\?", re.S)
_QUOTED = r'"((?:[^"\\]|\\.)*)"'
_EDIT_PAIR = re.compile(_QUOTED + r" -> " + _QUOTED)
_WORD = re.compile(r"[A-Za-z]+")


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _group_of(word: str) -> Tuple[str, ...] | None:
    for group in VOCABULARY:
        if word in group:
            return group
    return None


class MockCaptioner:
    """Captions from a digest table, else from the image's mean colour and brightness."""

    def __init__(self, table: Mapping[str, str] | None = None) -> None:
        self.table = dict(table or {})

    def caption(self, image: np.ndarray) -> Caption:
        digest = image_digest(image)
        if digest in self.table:
            return Caption.from_text(self.table[digest])

        rgb = np.asarray(image, dtype=np.float64).reshape(-1, image.shape[-1])[:, :3].mean(axis=0)
        color = min(COLORS, key=lambda name: float(np.sum((np.array(COLORS[name]) - rgb) ** 2)))
        luminance = float(to_grayscale(image).mean())
        weather = "sunny" if luminance > 0.6 else "cloudy" if luminance > 0.35 else "foggy"
        texture = "textured" if float(np.asarray(image, dtype=np.float64).std()) > 40 else "plain"
        return Caption(
            (
                f"A {color} object in {weather} weather.",
                f"The background is {texture}.",
            ),
            CaptionSource.CAPTIONER,
        )


class MockLLM:
    """
    Answers the three prompt stages from a small vocabulary.

    `script` maps (sha256(prompt), seed) to a canned answer; `refuse_when`
    makes the model refuse any request containing one of the substrings.
    """

    def __init__(
        self,
        script: Mapping[Tuple[str, int], str] | None = None,
        refuse_when: Sequence[str] = (),
    ) -> None:
        self.script = dict(script or {})
        self.refuse_when = tuple(refuse_when)

    @staticmethod
    def prompt_key(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest()

    def complete(self, prompt: str, seed: int, temperature: float = 0.7) -> str:
        scripted = self.script.get((self.prompt_key(prompt), int(seed)))
        if scripted is not None:
            return scripted

        request = prompt.split(REQUEST_INTRO)[-1]
        if any(s in request for s in self.refuse_when):
            return REFUSAL

        stage = next(
            (s for s, text in FORMAT_INSTRUCTIONS.items() if prompt.rstrip().endswith(text)),
            None,
        )
        found = _CAPTION_IN_REQUEST.search(request)
        caption = found.group(1) if found else ""

        if stage is Stage.KEYWORDS:
            return "Sure! Here you go.\nKEYWORDS: " + json.dumps(self._keywords(caption))
        if stage is Stage.ALTERNATIVES:
            listed = _KEYWORDS_IN_REQUEST.search(request)
            keywords = json.loads(listed.group(1)) if listed else self._keywords(caption)
            return "ALTERNATIVES: " + json.dumps(self._alternatives(keywords, seed))
        if stage is Stage.COUNTERFACTUAL:
            return "CAPTION: " + _quote(self._rewrite(caption, request))
        return REFUSAL

    @staticmethod
    def _keywords(caption: str) -> List[str]:
        words: List[str] = []
        for token in _WORD.findall(caption.lower()):
            if _group_of(token) and token not in words:
                words.append(token)
        return words

    @staticmethod
    def _alternatives(keywords: Sequence[str], seed: int) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for keyword in keywords:
            group = _group_of(keyword.lower())
            if group is None:
                out[keyword] = [f"different {keyword}"]
                continue
            siblings = [w for w in group if w != keyword.lower()]
            shift = int(seed) % len(siblings)
            out[keyword] = (siblings[shift:] + siblings[:shift])[:3]
        return out

    @staticmethod
    def _rewrite(caption: str, request: str) -> str:
        result = caption
        for raw_key, raw_alt in _EDIT_PAIR.findall(request):
            keyword, alternative = json.loads(f'"{raw_key}"'), json.loads(f'"{raw_alt}"')
            pattern = re.compile(r"(?i)\b" + re.escape(keyword) + r"\b")
            rewritten = pattern.sub(alternative, result, count=1)
            if rewritten == result:
                rewritten = f"{result} Everything looks {alternative}."
            result = rewritten
        return result


class ScriptedLLM:
    """Replays `responses` in order (the last one repeats) and records every call."""

    def __init__(self, responses: Sequence[str]) -> None:
        if not responses:
            raise ValueError("ScriptedLLM needs at least one response")
        self.responses = list(responses)
        self.calls: List[Tuple[str, int]] = []

    def complete(self, prompt: str, seed: int, temperature: float = 0.7) -> str:
        self.calls.append((prompt, int(seed)))
        return self.responses[min(len(self.calls), len(self.responses)) - 1]


class MockGenerator:
    """Recolours the edge map: a seed-dependent fill, inverted edges and light noise."""

    def __init__(self, size_override: Tuple[int, int] | None = None) -> None:
        self.size_override = size_override

    def generate(self, caption: str, edges: np.ndarray, seed: int) -> np.ndarray:
        height, width = edges.shape
        rng = np.random.default_rng(stable_seed(seed, caption))
        fill = rng.integers(0, 256, size=3)
        image = np.empty((height, width, 3), dtype=np.int64)
        image[:] = fill
        image[edges] = 255 - fill
        image += rng.integers(0, 16, size=image.shape)
        image = np.clip(image, 0, 255).astype(np.uint8)
        if self.size_override is not None:
            h, w = self.size_override
            image = np.resize(image, (h, w, 3))
        return image


class MockModel:
    """
    Classifier/segmenter. Known images (by digest) get their table answer;
    anything else gets a label derived from the digest, or a mask from
    quantised luminance.
    """

    def __init__(
        self,
        class_count: int = 1000,
        labels: Mapping[str, int] | None = None,
        masks: Mapping[str, np.ndarray] | None = None,
        shape_override: Tuple[int, int] | None = None,
    ) -> None:
        self.class_count = class_count
        self.labels = dict(labels or {})
        self.masks = dict(masks or {})
        self.shape_override = shape_override

    def classify(self, image: np.ndarray) -> int:
        digest = image_digest(image)
        if digest in self.labels:
            return int(self.labels[digest])
        return int(digest[:8], 16) % self.class_count

    def segment(self, image: np.ndarray) -> np.ndarray:
        digest = image_digest(image)
        if digest in self.masks:
            mask = np.asarray(self.masks[digest])
        else:
            levels = np.floor(to_grayscale(image) * self.class_count)
            mask = np.clip(levels, 0, self.class_count - 1)
        if self.shape_override is not None:
            h, w = self.shape_override
            mask = np.resize(mask, (h, w))
        return mask.astype(np.uint8)


@dataclass
class MockServices:
    captioner: MockCaptioner = field(default_factory=MockCaptioner)
    llm: Any = field(default_factory=MockLLM)
    generator: MockGenerator = field(default_factory=MockGenerator)
    model: MockModel = field(default_factory=MockModel)

    @classmethod
    def default(cls, class_count: int = 1000) -> "MockServices":
        return cls(model=MockModel(class_count=class_count))

    def handle(self, route: str, body: Dict[str, Any]) -> Dict[str, Any]:
        if route == "/caption":
            caption = self.captioner.caption(decode_b64(body["image_b64"]))
            return {"sentences": list(caption.sentences)}
        if route == "/complete":
            text = self.llm.complete(body["prompt"], int(body["seed"]), float(body.get("temperature", 0.7)))
            return {"text": text}
        if route == "/generate":
            edges = decode_b64(body["conditioning_b64"], mode="L") > 127
            image = self.generator.generate(body["caption"], edges, int(body["seed"]))
            return {"image_b64": encode_b64(image)}
        if route == "/predict":
            image = decode_b64(body["image_b64"])
            if body.get("task") == "segmentation":
                return {"mask_b64": encode_b64(self.model.segment(image))}
            return {"label": self.model.classify(image)}
        raise KeyError(route)


class MockServiceAdapter(HTTPAdapter):
    """Serves `mock://<role>/<route>` requests in-process."""

    def __init__(
        self,
        services: MockServices,
        fault: Callable[[str, Dict[str, Any]], int | None] | None = None,
    ) -> None:
        super().__init__()
        self.services = services
        # fault(route, body) -> HTTP status to fail with, or None
        self.fault = fault
        self.calls = 0
        self._count_lock = threading.Lock()

    def send(self, request: requests.PreparedRequest, **kwargs: Any) -> requests.Response:
        with self._count_lock:
            self.calls += 1

        route = urlparse(request.url).path
        body_bytes = request.body or b"{}"
        if isinstance(body_bytes, str):
            body_bytes = body_bytes.encode("utf-8")

        status, reason = 200, "OK"
        try:
            body = json.loads(body_bytes)
            forced = self.fault(route, body) if self.fault else None
            if forced is not None:
                status, reason = forced, "Injected fault"
                payload: Dict[str, Any] = {"error": f"injected {forced} for {route}"}
            else:
                payload = self.services.handle(route, body)
        except KeyError as exc:
            status, reason = 404, "Not Found"
            payload = {"error": f"unknown route or field {exc}"}
        except (DillemaError, ValueError) as exc:
            status, reason = 500, "Internal Server Error"
            payload = {"error": str(exc)}

        content = json.dumps(payload).encode("utf-8")
        raw = HTTPResponse(
            body=io.BytesIO(content),
            headers={"Content-Type": "application/json", "Content-Length": str(len(content))},
            status=status,
            reason=reason,
            preload_content=False,
            decode_content=False,
            request_url=request.url,
        )
        return self.build_response(request, raw)
