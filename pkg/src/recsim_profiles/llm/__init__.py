from .backends import LiveBackend, ReplayBackend, ScriptedBackend, load_scripted_table
from .gateway import Gateway, Structured
from .parsing import SchemaViolation, parse_response
from .types import PromptRequest, PromptResponse, ResponseSchema, cache_key

__all__ = [
    "Gateway",
    "LiveBackend",
    "PromptRequest",
    "PromptResponse",
    "ReplayBackend",
    "ResponseSchema",
    "SchemaViolation",
    "ScriptedBackend",
    "Structured",
    "cache_key",
    "load_scripted_table",
    "parse_response",
]
