# src/run_config.py
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping

from src.api_client import ROLES, Endpoint
from src.conditioning import DEFAULT_HIGH, DEFAULT_LOW, DEFAULT_SIGMA
from src.dataset_io import ManifestMode, SamplingPlan
from src.errors import ConfigError, InvariantViolation
from src.prompts import RetryPolicy

logger = logging.getLogger(__name__)

# Always use the config folder next to project root
_PROJECT_ROOT = Path(__file__).resolve().parents[1]
_CONFIG_DIR = _PROJECT_ROOT / "config"
RUN_JSON_PATH = _CONFIG_DIR / "run.json"

# In-memory cache, one entry per config file
_CACHE: Dict[Path, Dict[str, Any]] = {}

# Fields that change how a run executes but not what it produces
_UNHASHED = {"parallelism", "max_in_flight", "output_dir", "cache_dir", "offline", "manifest"}

ALL_EDITS = "all"


class CaptionMode(str, Enum):
    SHARED = "shared"
    PER_AUGMENTATION = "per-augmentation"


@dataclass(frozen=True)
class RunConfig:
    manifest: str | None = None
    output_dir: str = "output"
    cache_dir: str | None = None
    offline: bool = False
    seed: int = 0
    per_class: int = 25
    augmentations: int = 5
    budget: int | None = 1  # None or "all": every keyword
    max_attempts: int = 8
    temperature: float = 0.7
    parallelism: int = 4
    max_in_flight: int = 4
    caption_mode: CaptionMode = CaptionMode.SHARED
    manifest_mode: ManifestMode = ManifestMode.COMBINED
    low_threshold: float = DEFAULT_LOW
    high_threshold: float = DEFAULT_HIGH
    blur_sigma: float = DEFAULT_SIGMA
    guidance: float | None = None
    template_dir: str | None = None
    endpoints: Dict[str, str] = field(default_factory=dict)  # role -> default URL

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "caption_mode", CaptionMode(self.caption_mode))
            object.__setattr__(self, "manifest_mode", ManifestMode(self.manifest_mode))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

        for name in ("parallelism", "max_in_flight", "per_class", "augmentations", "max_attempts"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.budget == ALL_EDITS:
            object.__setattr__(self, "budget", None)
        if self.budget is not None and (isinstance(self.budget, bool) or not isinstance(self.budget, int)):
            raise ConfigError(f"budget must be an integer or \"{ALL_EDITS}\", got {self.budget!r}")
        if self.budget is not None and self.budget < 0:
            raise ConfigError(f"budget must be >= 0, got {self.budget}")
        if not 0.0 < self.low_threshold < self.high_threshold <= 1.0:
            raise ConfigError(
                f"need 0 < low_threshold < high_threshold <= 1, "
                f"got {self.low_threshold} / {self.high_threshold}"
            )
        unknown_roles = set(self.endpoints) - set(ROLES)
        if unknown_roles:
            raise ConfigError(f"unknown endpoint roles: {', '.join(sorted(unknown_roles))}")

    @property
    def sampling_plan(self) -> SamplingPlan:
        try:
            return SamplingPlan(self.per_class, self.augmentations, self.seed)
        except InvariantViolation as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(self.max_attempts, self.seed, self.temperature)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def resolve_endpoints(self) -> Dict[str, Endpoint]:
        """.env wins over the URLs in the config file."""
        return {role: Endpoint.from_env(role, self.endpoints.get(role)) for role in ROLES}

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        _check_keys(overrides, "override")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _check_keys(data: Mapping[str, Any], where: str) -> None:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def _load_raw(path: Path) -> Dict[str, Any]:
    """Load JSON exactly as stored; cached per path."""
    path = path.resolve()
    if path in _CACHE:
        return _CACHE[path]

    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")

    # keys starting with "_" are comments
    data = {k: v for k, v in data.items() if not k.startswith("_")}
    _CACHE[path] = data
    return data


def load_run_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    """Built-in defaults, then the config file, then non-None CLI overrides."""
    raw = dict(_load_raw(Path(path) if path else RUN_JSON_PATH))
    _check_keys(raw, "config")
    try:
        config = RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad run configuration: {exc}") from exc
    return config.with_overrides(**dict(overrides or {}))


def config_hash(config: RunConfig) -> str:
    """sha256 over every field that influences the produced records."""
    data = {k: v for k, v in asdict(config).items() if k not in _UNHASHED}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=_enum_value)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _enum_value(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
