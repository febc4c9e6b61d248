"""Newline-delimited profile store: one header record, then one profile per line."""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterable

from .types import TaskAlignedProfile

logger = logging.getLogger(__name__)

STORE_FORMAT = 1


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def profile_key(profile: TaskAlignedProfile) -> str:
    return f"{profile.generator}/{profile.task_family or 'any'}/{profile.user_id}"


def read_store(path) -> tuple[dict | None, dict[str, TaskAlignedProfile]]:
    """Return ``(header, key -> profile)``; a torn trailing line is ignored."""
    path = Path(path)
    if not path.exists():
        return None, {}
    header = None
    profiles: dict[str, TaskAlignedProfile] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("ignoring unreadable line %d of %s", lineno, path)
                continue
            if rec.get("type") == "header":
                header = rec
            elif rec.get("type") == "profile":
                profile = TaskAlignedProfile.from_record(rec["profile"])
                profiles[profile_key(profile)] = profile
    return header, profiles


class ProfileStoreWriter:
    """Single-writer appender; ``finalize`` rewrites the file in canonical order."""

    def __init__(self, path, header: dict):
        self.path = Path(path)
        self.header = {"type": "header", "format": STORE_FORMAT, **header}
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        existing_header, _ = read_store(self.path)
        if existing_header is None or existing_header.get("config_digest") != self.header.get("config_digest"):
            with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(dumps(self.header) + "\n")
        else:
            _drop_torn_tail(self.path)

    def append(self, profile: TaskAlignedProfile) -> None:
        line = dumps({"type": "profile", "profile": profile.to_record()}) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line)

    def finalize(self, order: Iterable[str]) -> None:
        _, profiles = read_store(self.path)
        ordered = [profiles[k] for k in order if k in profiles]
        write_store(self.path, self.header, ordered)


def _drop_torn_tail(path: Path) -> None:
    """Cut an unterminated last line so the next append starts cleanly."""
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        with open(path, "r+b") as fh:
            fh.truncate(data.rfind(b"\n") + 1)


def write_store(path, header: dict, profiles: Iterable[TaskAlignedProfile]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps({"type": "header", "format": STORE_FORMAT, **header}) + "\n")
        for p in profiles:
            fh.write(dumps({"type": "profile", "profile": p.to_record()}) + "\n")
    os.replace(tmp, path)
