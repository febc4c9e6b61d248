from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any

from ..errors import MalformedOutputError
from .backends import Backend
from .parsing import SchemaViolation, parse_response
from .types import PromptRequest, PromptResponse, ResponseSchema

logger = logging.getLogger(__name__)

DEFAULT_PARSE_ATTEMPTS = 3

CORRECTIVE_SUFFIX = (
    "\n\nYour previous reply could not be used ({error}). "
    "Answer again, following the required output format exactly."
)


@dataclass
class Structured:
    value: Any
    raw: str
    repaired: bool = False
    attempts: int = 1
    notes: list[str] = field(default_factory=list)


class Gateway:
    """Single prompt-execution entry point shared by the pipeline and the tasks."""

    def __init__(
        self,
        backend: Backend,
        parse_attempts: int = DEFAULT_PARSE_ATTEMPTS,
        max_in_flight: int = 1,
        repair: bool = True,
    ):
        self.backend = backend
        self.parse_attempts = parse_attempts
        self.repair = repair
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self.max_in_flight = max(1, max_in_flight)

    def execute(self, request: PromptRequest) -> PromptResponse:
        with self._slots:
            return self.backend.complete(request)

    def execute_structured(self, request: PromptRequest, schema: ResponseSchema) -> Structured:
        raw_attempts: list[str] = []
        current = request
        for attempt in range(1, self.parse_attempts + 1):
            response = self.execute(current)
            raw_attempts.append(response.text)
            try:
                parsed = parse_response(response.text, schema, repair=self.repair)
            except SchemaViolation as exc:
                logger.debug("%s attempt %d rejected: %s", request.tag, attempt, exc)
                current = PromptRequest(
                    model_id=request.model_id,
                    system_message=request.system_message,
                    user_message=request.user_message + CORRECTIVE_SUFFIX.format(error=exc),
                    temperature=request.temperature,
                    max_tokens=request.max_tokens,
                    request_seed=request.request_seed,
                    tag=request.tag,
                )
                continue
            for note in parsed.notes:
                logger.debug("%s: %s", request.tag, note)
            return Structured(parsed.value, response.text, parsed.repaired, attempt, parsed.notes)
        raise MalformedOutputError(f"{request.tag or 'request'}: no valid {schema.kind} output", raw_attempts)
