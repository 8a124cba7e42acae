# src/api_client.py
"""
JSON-over-HTTP client for the four model services.

    POST /caption   {image_b64}                              -> {sentences: [...]}
    POST /complete  {prompt, seed, temperature, max_tokens}  -> {text}
    POST /generate  {caption, conditioning_b64, seed}        -> {image_b64}
    POST /predict   {image_b64, task}                        -> {label} | {mask_b64}

Endpoints come from DILLEMA_<ROLE>_URL / DILLEMA_<ROLE>_TOKEN in .env.
A `mock://<role>` URL is served in-process by src.mock_backends.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np
import requests
import requests_cache
from dotenv import load_dotenv

from src.conditioning import EdgeMap
from src.errors import (
    BackendError,
    BackendTimeout,
    ConfigError,
    DecodeError,
    DimensionMismatch,
    InvariantViolation,
    ShapeError,
)
from src.images import decode_b64, encode_b64
from src.mock_backends import MOCK_SCHEME, MockServiceAdapter, MockServices
from src.models import Caption, CaptionSource, TaskKind

load_dotenv()

logger = logging.getLogger(__name__)

ROLES = ("captioner", "llm", "generator", "model")
DEFAULT_TIMEOUT = 60.0
DEFAULT_IN_FLIGHT = 4


@dataclass(frozen=True)
class Endpoint:
    role: str
    base_url: str
    timeout: float = DEFAULT_TIMEOUT
    auth_token: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"unknown backend role {self.role!r}")
        if not self.base_url:
            raise ConfigError(f"no URL configured for the {self.role} backend")
        if not self.timeout or self.timeout <= 0:
            raise ConfigError(f"{self.role} timeout must be > 0, got {self.timeout}")

    @classmethod
    def from_env(cls, role: str, default_url: str | None = None) -> "Endpoint":
        """Read DILLEMA_<ROLE>_URL, _TOKEN and _TIMEOUT."""
        prefix = f"DILLEMA_{role.upper()}"
        url = os.getenv(f"{prefix}_URL") or default_url
        if not url:
            raise ConfigError(f"Missing {prefix}_URL in your environment or .env file.")
        timeout_raw = os.getenv(f"{prefix}_TIMEOUT")
        try:
            timeout = float(timeout_raw) if timeout_raw else DEFAULT_TIMEOUT
        except ValueError as exc:
            raise ConfigError(f"{prefix}_TIMEOUT is not a number: {timeout_raw!r}") from exc
        return cls(role, url, timeout, os.getenv(f"{prefix}_TOKEN") or None)

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith(MOCK_SCHEME)


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    caption: str
    conditioning: EdgeMap
    seed: int
    guidance: float | None = None
    size: tuple[int, int] | None = None  # (height, width); defaults to the edge map's

    def __post_init__(self) -> None:
        if not self.caption.strip():
            raise InvariantViolation("generation caption is empty")
        cond = (self.conditioning.height, self.conditioning.width)
        if self.size is not None and tuple(self.size) != cond:
            raise InvariantViolation(f"conditioning is {cond}, requested output {self.size}")

    @property
    def output_size(self) -> tuple[int, int]:
        return (self.conditioning.height, self.conditioning.width)


# ---------------------------------------------------------------------------
# Session + replay cache
# ---------------------------------------------------------------------------


def cache_key(request: requests.PreparedRequest, **kwargs: Any) -> str:
    """sha256 over method, URL (role) and the canonical JSON body (seed included)."""
    body = request.body or b""
    if isinstance(body, str):
        body = body.encode("utf-8")
    try:
        canonical = json.dumps(json.loads(body), sort_keys=True, separators=(",", ":"))
    except ValueError:
        canonical = body.decode("utf-8", "replace")
    text = f"{request.method}\n{request.url}\n{canonical}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def make_session(
    cache_dir: str | Path | None = None,
    offline: bool = False,
    mock_services: MockServices | None = None,
) -> requests.Session:
    """
    Plain session, or a requests-cache session that records every successful
    POST under `cache_dir`. `offline` answers from the cache only.
    """
    if cache_dir:
        session: requests.Session = requests_cache.CachedSession(
            cache_name=str(Path(cache_dir) / "http"),
            backend="filesystem",
            serializer="json",
            allowable_methods=("POST",),
            allowable_codes=(200,),
            expire_after=requests_cache.NEVER_EXPIRE,
            key_fn=cache_key,
        )
        session.settings.only_if_cached = offline
    elif offline:
        raise ConfigError("offline replay needs a cache directory (--cache-dir)")
    else:
        session = requests.Session()

    session.mount(MOCK_SCHEME, MockServiceAdapter(mock_services or MockServices.default()))
    return session


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


class BackendClient:
    """One model service. Safe to share between threads."""

    def __init__(
        self,
        endpoint: Endpoint,
        session: requests.Session,
        max_in_flight: int = DEFAULT_IN_FLIGHT,
    ) -> None:
        self.endpoint = endpoint
        self.session = session
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))

    @property
    def role(self) -> str:
        return self.endpoint.role

    def _post(self, route: str, payload: Mapping[str, Any]) -> Dict[str, Any]:
        url = self.endpoint.base_url.rstrip("/") + route
        headers = {"Content-Type": "application/json"}
        if self.endpoint.auth_token:
            headers["Authorization"] = f"Bearer {self.endpoint.auth_token}"

        with self._slots:
            try:
                resp = self.session.post(
                    url,
                    data=json.dumps(payload, sort_keys=True),
                    headers=headers,
                    timeout=self.endpoint.timeout,
                )
            except requests.Timeout as exc:
                raise BackendTimeout(
                    self.role, f"no answer from {url} within {self.endpoint.timeout}s"
                ) from exc
            except requests.RequestException as exc:
                # Other network issues (DNS, refused connection, ...)
                raise BackendError(self.role, f"network error contacting {url}: {exc}") from exc

        if getattr(resp, "from_cache", False):
            logger.debug("%s %s answered from cache", self.role, route)

        if resp.status_code == 504 and getattr(
            getattr(self.session, "settings", None), "only_if_cached", False
        ):
            raise BackendError(self.role, f"{route} request not in the replay cache", status=504)
        if resp.status_code != 200:
            raise BackendError(self.role, f"raw response: {resp.text[:500]}", status=resp.status_code)

        try:
            data = resp.json()
        except ValueError as exc:
            raise BackendError(self.role, f"{route} returned non-JSON body: {resp.text[:500]}") from exc
        if not isinstance(data, dict):
            raise BackendError(self.role, f"{route} returned {type(data).__name__}, not an object")
        return data

    def _field(self, data: Dict[str, Any], key: str, kind: type) -> Any:
        value = data.get(key)
        if not isinstance(value, kind):
            raise BackendError(self.role, f"response lacks {key!r} ({kind.__name__})")
        return value

    def caption_image(self, image: np.ndarray) -> Caption:
        data = self._post("/caption", {"image_b64": encode_b64(np.asarray(image, dtype=np.uint8))})
        sentences = self._field(data, "sentences", list)
        try:
            return Caption(tuple(str(s) for s in sentences), CaptionSource.CAPTIONER)
        except InvariantViolation as exc:
            raise BackendError(self.role, f"unusable caption: {exc}") from exc

    def complete(self, prompt: str, seed: int, temperature: float, max_tokens: int = 512) -> str:
        if not prompt or not prompt.strip():
            raise InvariantViolation("prompt is empty")
        data = self._post(
            "/complete",
            {"prompt": prompt, "seed": int(seed), "temperature": float(temperature), "max_tokens": max_tokens},
        )
        return self._field(data, "text", str)

    def generate_image(self, request: GenerationRequest) -> np.ndarray:
        payload: Dict[str, Any] = {
            "caption": request.caption,
            "conditioning_b64": encode_b64(request.conditioning.pixels.astype(bool)),
            "seed": int(request.seed),
        }
        if request.guidance is not None:
            payload["guidance"] = float(request.guidance)

        data = self._post("/generate", payload)
        try:
            image = decode_b64(self._field(data, "image_b64", str))
        except DecodeError as exc:
            raise BackendError(self.role, str(exc)) from exc

        if tuple(image.shape[:2]) != request.output_size:
            raise DimensionMismatch(
                f"generator returned {image.shape[:2]}, requested {request.output_size}"
            )
        return image

    def predict(self, image: np.ndarray, task_kind: TaskKind) -> int | np.ndarray:
        task_kind = TaskKind(task_kind)
        image = np.asarray(image, dtype=np.uint8)
        data = self._post("/predict", {"image_b64": encode_b64(image), "task": task_kind.value})

        if task_kind is TaskKind.CLASSIFICATION:
            label = data.get("label")
            if not isinstance(label, int) or isinstance(label, bool):
                raise BackendError(self.role, "classification response lacks an integer 'label'")
            return label

        try:
            mask = decode_b64(self._field(data, "mask_b64", str), mode=None).astype(np.int64)
        except DecodeError as exc:
            raise BackendError(self.role, str(exc)) from exc
        if mask.ndim != 2 or tuple(mask.shape) != tuple(image.shape[:2]):
            raise ShapeError(f"segmenter returned {mask.shape} for a {image.shape[:2]} image")
        return mask


@dataclass
class Backends:
    captioner: BackendClient
    llm: BackendClient
    generator: BackendClient
    model: BackendClient


def connect(
    endpoints: Mapping[str, Endpoint],
    *,
    cache_dir: str | Path | None = None,
    offline: bool = False,
    max_in_flight: int = DEFAULT_IN_FLIGHT,
    mock_services: MockServices | None = None,
) -> Backends:
    """Build one client per role over a shared (optionally caching) session."""
    missing = [r for r in ROLES if r not in endpoints]
    if missing:
        raise ConfigError(f"no endpoint configured for {', '.join(missing)}")

    session = make_session(cache_dir, offline, mock_services)
    clients = {role: BackendClient(endpoints[role], session, max_in_flight) for role in ROLES}
    return Backends(**clients)
