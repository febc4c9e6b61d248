"""Versioned prompt templates shipped under ``resources/prompts``.

Each file starts with ``# version: N`` followed by ``[system]`` and/or
``[user]`` sections; placeholders use :class:`string.Template` syntax.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from string import Template

_SECTION = re.compile(r"^\[(system|user)\]\s*$", re.M)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: int
    system: str | None
    user: str | None

    def render_system(self, **values) -> str:
        return Template(self.system or "").substitute(values).strip()

    def render_user(self, **values) -> str:
        return Template(self.user or "").substitute(values).strip()


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    text = resources.files("recsim_profiles.resources.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    header, _, body = text.partition("\n")
    m = re.match(r"#\s*version:\s*(\d+)", header)
    if not m:
        raise ValueError(f"prompt template {name!r} lacks a version header")
    parts = _SECTION.split(body)
    sections = {parts[i]: parts[i + 1].strip("\n") for i in range(1, len(parts) - 1, 2)}
    return PromptTemplate(name, int(m.group(1)), sections.get("system"), sections.get("user"))


TEMPLATE_NAMES = (
    "stage1_extract",
    "stage2_consolidate",
    "stage3_path",
    "stage3_perturb",
    "baseline_recagent",
    "baseline_agent4rec",
    "agent_system",
    "agent_discrimination",
    "agent_ranking",
    "agent_rating",
)


def template_versions() -> dict[str, int]:
    return {name: load_template(name).version for name in TEMPLATE_NAMES}
