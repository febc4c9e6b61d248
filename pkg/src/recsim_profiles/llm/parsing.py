"""Local validation of structured completions.

Prompts ask for a JSON object; when a model answers in loose prose instead,
id-list kinds fall back to scanning tokens against the allowed ids.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

from .types import ResponseSchema

RECAGENT_ROLES = ("watcher", "explorer", "critic", "chatter", "poster")


class SchemaViolation(ValueError):
    pass


@dataclass
class Parsed:
    value: Any
    repaired: bool = False
    notes: list[str] = field(default_factory=list)


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def extract_json(text: str) -> Any:
    """Return the first decodable JSON object/array embedded in ``text``."""
    m = _FENCE.search(text)
    if m:
        text = m.group(1)
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(text, i)
                return value
            except json.JSONDecodeError:
                continue
    raise SchemaViolation("no JSON object found")


def _json_or_none(text: str) -> Any:
    try:
        return extract_json(text)
    except SchemaViolation:
        return None


_TOKEN_SPLIT = re.compile(r"[,;\s]+")
_STRIP = "\"'`[](){}.:"


def _scan_ids(text: str, allowed: list[str]) -> list[str]:
    allowed_set = set(allowed)
    out = []
    for tok in _TOKEN_SPLIT.split(text):
        tok = tok.strip(_STRIP)
        if tok in allowed_set:
            out.append(tok)
    return out


def _id_list(text: str, key: str) -> tuple[list[str] | None, bool]:
    """(ids, from_json). ``None`` when no JSON list could be found."""
    data = _json_or_none(text)
    if isinstance(data, dict):
        data = data.get(key)
    if isinstance(data, list):
        return [str(x).strip() for x in data], True
    return None, False


def _parse_selection(text: str, schema: ResponseSchema, repair: bool) -> Parsed:
    cands = [str(c) for c in schema.constraints["candidates"]]
    max_size = schema.constraints.get("max_size")
    ids, from_json = _id_list(text, "selected")
    if ids is None:
        ids = _scan_ids(text, cands)
        if not ids:
            raise SchemaViolation("no candidate ids found in the reply")
    notes = []
    kept: list[str] = []
    for i in ids:
        if i not in cands:
            notes.append(f"dropped non-candidate {i!r}")
        elif i in kept:
            notes.append(f"dropped duplicate {i!r}")
        else:
            kept.append(i)
    if max_size is not None and len(kept) > max_size:
        notes.append(f"truncated {len(kept)} selections to {max_size}")
        kept = kept[:max_size]
    if notes and not repair:
        raise SchemaViolation("; ".join(notes))
    return Parsed(tuple(kept), bool(notes), notes)


def repair_ranking(ids: list[str], presentation: list[str]) -> tuple[list[str], list[str]]:
    """Dedupe keep-first, drop unknown ids, append missing ids in presentation order."""
    notes = []
    seen: list[str] = []
    allowed = set(presentation)
    for i in ids:
        if i not in allowed:
            notes.append(f"dropped non-candidate {i!r}")
        elif i in seen:
            notes.append(f"dropped duplicate {i!r}")
        else:
            seen.append(i)
    missing = [c for c in presentation if c not in seen]
    if missing:
        notes.append(f"appended missing {missing}")
    return seen + missing, notes


def _parse_ranking(text: str, schema: ResponseSchema, repair: bool) -> Parsed:
    cands = [str(c) for c in schema.constraints["candidates"]]
    ids, _ = _id_list(text, "ranking")
    if ids is None:
        ids = _scan_ids(text, cands)
    if not any(i in cands for i in ids):
        raise SchemaViolation("no candidate ids found in the ranking")
    perm, notes = repair_ranking(ids, cands)
    if notes and not repair:
        raise SchemaViolation("; ".join(notes))
    return Parsed(tuple(perm), bool(notes), notes)


_RATING_LINE = re.compile(r"^\s*[-*]?\s*\"?([^\s:=\"]+)\"?\s*[:=]\s*(-?\d+(?:\.\d+)?)", re.M)


def _parse_rating_map(text: str, schema: ResponseSchema, repair: bool) -> Parsed:
    cands = [str(c) for c in schema.constraints["candidates"]]
    lo, hi = schema.constraints["scale"]
    data = _json_or_none(text)
    if isinstance(data, dict) and isinstance(data.get("ratings"), dict):
        data = data["ratings"]
    raw: dict[str, Any]
    if isinstance(data, dict):
        raw = {str(k): v for k, v in data.items()}
    else:
        raw = {m.group(1): m.group(2) for m in _RATING_LINE.finditer(text)}
    notes = []
    out: dict[str, float] = {}
    for k, v in raw.items():
        if k not in cands:
            notes.append(f"ignored non-candidate {k!r}")
            continue
        try:
            r = float(v)
        except (TypeError, ValueError):
            raise SchemaViolation(f"rating for {k!r} is not a number: {v!r}") from None
        if r != r:
            raise SchemaViolation(f"rating for {k!r} is NaN")
        if r < lo or r > hi:
            notes.append(f"clamped {k!r} from {r} into [{lo}, {hi}]")
            r = min(max(r, lo), hi)
        out[k] = r
    missing = [c for c in cands if c not in out]
    if missing:
        raise SchemaViolation(f"missing ratings for {missing}")
    if notes and not repair:
        raise SchemaViolation("; ".join(notes))
    return Parsed({c: out[c] for c in cands}, bool(notes), notes)


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.+?)\s*$", re.M)


def _parse_trait_list(text: str, schema: ResponseSchema, repair: bool) -> Parsed:
    data = _json_or_none(text)
    if isinstance(data, dict):
        data = data.get("traits")
    if isinstance(data, list):
        items = [str(x).strip() for x in data if isinstance(x, (str, int, float))]
    else:
        items = [m.group(1) for m in _BULLET.finditer(text)]
    items = [t for t in items if t]
    kept, seen, notes = [], set(), []
    for t in items:
        key = " ".join(t.casefold().split())
        if key in seen:
            notes.append(f"collapsed duplicate trait {t!r}")
            continue
        seen.add(key)
        kept.append(t)
    lo = schema.constraints.get("min_items", 1)
    hi = schema.constraints.get("max_items")
    if len(kept) < lo:
        raise SchemaViolation(f"expected at least {lo} trait(s), got {len(kept)}")
    if hi is not None and len(kept) > hi:
        raise SchemaViolation(f"expected at most {hi} trait(s), got {len(kept)}")
    # duplicate collapsing is bookkeeping, not a repair of invalid output
    return Parsed(kept, False, notes)


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.casefold()).strip("-")


def _parse_decision_path(text: str, schema: ResponseSchema, repair: bool) -> Parsed:
    data = _json_or_none(text)
    if isinstance(data, dict):
        data = data.get("steps")
    if not isinstance(data, list):
        raise SchemaViolation("expected a JSON list of steps")
    steps = []
    for entry in data:
        if isinstance(entry, str):
            name, desc = entry, ""
        elif isinstance(entry, dict):
            name, desc = str(entry.get("name", "")), str(entry.get("description", ""))
        else:
            raise SchemaViolation(f"unusable step entry {entry!r}")
        if not slugify(name):
            raise SchemaViolation("step without a name")
        steps.append((slugify(name), name.strip(), desc.strip()))
    lo, hi = schema.constraints.get("min_steps", 2), schema.constraints.get("max_steps", 6)
    if not lo <= len(steps) <= hi:
        raise SchemaViolation(f"expected {lo}-{hi} steps, got {len(steps)}")
    if len({s[0] for s in steps}) != len(steps):
        raise SchemaViolation("step names are not unique")
    return Parsed(steps)


def _parse_profile(text: str, schema: ResponseSchema, repair: bool) -> Parsed:
    data = _json_or_none(text)
    if not isinstance(data, dict):
        raise SchemaViolation("expected a JSON object")
    if schema.constraints["variant"] == "recagent":
        roles = schema.constraints.get("roles", RECAGENT_ROLES)
        role = str(data.get("role", "")).strip().casefold()
        if role not in roles:
            raise SchemaViolation(f"role {role!r} is not one of {', '.join(roles)}")
        behaviour = data.get("behaviour_features", data.get("behavior_features", ""))
        value = {
            "personality": str(data.get("personality", "") or "").strip(),
            "interests": str(data.get("interests", "") or "").strip(),
            "behaviour_features": str(behaviour or "").strip(),
            "role": role,
        }
        return Parsed(value)
    tastes = data.get("tastes")
    if not isinstance(tastes, list) or not tastes:
        raise SchemaViolation("expected at least one taste/rationale pair")
    pairs = []
    for entry in tastes:
        if not isinstance(entry, dict):
            raise SchemaViolation(f"unusable taste entry {entry!r}")
        taste = str(entry.get("taste", "") or "").strip()
        rationale = str(entry.get("rationale", "") or "").strip()
        if not taste or not rationale:
            raise SchemaViolation("taste entry missing taste or rationale")
        pairs.append((taste, rationale))
    return Parsed(pairs)


def _parse_free_text(text: str, schema: ResponseSchema, repair: bool) -> Parsed:
    value = text.strip().strip('"').strip()
    data = _json_or_none(text)
    if isinstance(data, dict) and isinstance(data.get("text"), str):
        value = data["text"].strip()
    if not value:
        raise SchemaViolation("empty reply")
    return Parsed(value)


_PARSERS = {
    "selection_set": _parse_selection,
    "ranking": _parse_ranking,
    "rating_map": _parse_rating_map,
    "trait_list": _parse_trait_list,
    "decision_path": _parse_decision_path,
    "profile": _parse_profile,
    "free_text": _parse_free_text,
}


def parse_response(text: str, schema: ResponseSchema, repair: bool = True) -> Parsed:
    parsed = _PARSERS[schema.kind](text, schema, repair and schema.constraints.get("repair", True))
    if schema.check is not None:
        schema.check(parsed.value)
    return parsed
