from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional

DEFAULT_TEMPERATURE = 0.1
DEFAULT_MAX_TOKENS = 1024

BACKEND_KINDS = ("live", "scripted", "replay")


@dataclass(frozen=True)
class PromptRequest:
    model_id: str
    system_message: str
    user_message: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    request_seed: Optional[int] = None
    # pipeline step label, e.g. "stage1-extract"; not part of the cache key
    tag: str = ""

    def __post_init__(self):
        if not self.system_message or not self.user_message:
            raise ValueError("prompt messages must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "PromptRequest":
        return cls(**rec)


@dataclass(frozen=True)
class PromptResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    backend: str = "scripted"

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "PromptResponse":
        return cls(**rec)


def cache_key(request: PromptRequest) -> str:
    """SHA-256 over the fields that determine a completion (the tag is excluded)."""
    payload = [
        request.model_id,
        request.system_message,
        request.user_message,
        repr(float(request.temperature)),
        int(request.max_tokens),
        request.request_seed,
    ]
    blob = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


SCHEMA_KINDS = (
    "trait_list",
    "profile",
    "decision_path",
    "selection_set",
    "ranking",
    "rating_map",
    "free_text",
)


@dataclass(frozen=True)
class ResponseSchema:
    kind: str
    constraints: dict[str, Any] = field(default_factory=dict)
    # extra validation hook: raises SchemaViolation on rejection
    check: Optional[Callable[[Any], None]] = None

    def __post_init__(self):
        if self.kind not in SCHEMA_KINDS:
            raise ValueError(f"unknown schema kind {self.kind!r}")
        c = self.constraints
        if self.kind in ("selection_set", "ranking", "rating_map") and not c.get("candidates"):
            raise ValueError(f"{self.kind} schema needs a non-empty candidate list")
        if self.kind == "rating_map" and "scale" not in c:
            raise ValueError("rating_map schema needs a rating scale")
        if self.kind == "profile" and c.get("variant") not in ("recagent", "agent4rec"):
            raise ValueError("profile schema variant must be 'recagent' or 'agent4rec'")
        if self.kind == "decision_path":
            lo, hi = c.get("min_steps", 2), c.get("max_steps", 6)
            if not 1 <= lo <= hi:
                raise ValueError("inconsistent decision_path step bounds")
