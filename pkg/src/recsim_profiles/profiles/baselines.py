"""Baseline profile generators: recent interactions, RecAgent-style, Agent4Rec-style, empty."""

from __future__ import annotations

from ..data import DEFAULT_HISTORY_WINDOW, SplitDataset, recent_window
from ..errors import MalformedOutputError, StageError
from ..llm import Gateway, ResponseSchema
from ..llm.parsing import RECAGENT_ROLES
from ..prompts import template_versions
from ..seeds import derive_seed
from ..tasks import AgentSettings, render_history_item
from .pipeline import _request, render_history
from .types import TaskAlignedProfile, TraitDescriptor, empty_profile


def baseline_recent_interaction(user: str, split: SplitDataset, k: int = DEFAULT_HISTORY_WINDOW) -> TaskAlignedProfile:
    window = recent_window(split.train_by_user.get(user, []), k)
    lines = [render_history_item(split.items[ev.item_id], ev.rating) for ev in window]
    return TaskAlignedProfile(
        user_id=user,
        generator="recent_interaction",
        history_items=lines,
        provenance={"history_window": k},
    )


def baseline_recagent_style(
    user: str,
    split: SplitDataset,
    gateway: Gateway,
    *,
    k: int = DEFAULT_HISTORY_WINDOW,
    settings: AgentSettings = AgentSettings(),
    seed: int = 0,
) -> TaskAlignedProfile:
    window = recent_window(split.train_by_user.get(user, []), k)
    req = _request(
        "baseline_recagent", settings, "baseline-recagent", derive_seed(seed, "recagent", user),
        history=render_history(window, split.items),
    )
    try:
        out = gateway.execute_structured(req, ResponseSchema("profile", {"variant": "recagent", "roles": RECAGENT_ROLES}))
    except MalformedOutputError as exc:
        raise StageError("baseline-recagent", str(exc)) from exc
    v = out.value
    traits = [
        TraitDescriptor(f"{label}: {v[key]}", source="baseline")
        for key, label in (("personality", "personality"), ("interests", "interests"), ("behaviour_features", "behaviour"))
        if v[key]
    ]
    return TaskAlignedProfile(
        user_id=user,
        generator="recagent_style",
        traits=traits,
        tags={"role": v["role"]},
        provenance={"history_window": k, "template_versions": template_versions()},
    )


def baseline_agent4rec_style(
    user: str,
    split: SplitDataset,
    gateway: Gateway,
    *,
    k: int = DEFAULT_HISTORY_WINDOW,
    settings: AgentSettings = AgentSettings(),
    seed: int = 0,
) -> TaskAlignedProfile:
    window = recent_window(split.train_by_user.get(user, []), k)
    req = _request(
        "baseline_agent4rec", settings, "baseline-agent4rec", derive_seed(seed, "agent4rec", user),
        history=render_history(window, split.items),
    )
    try:
        out = gateway.execute_structured(req, ResponseSchema("profile", {"variant": "agent4rec"}))
    except MalformedOutputError as exc:
        raise StageError("baseline-agent4rec", str(exc)) from exc
    traits = [TraitDescriptor(taste, source="baseline", rationale=why) for taste, why in out.value]
    return TaskAlignedProfile(
        user_id=user,
        generator="agent4rec_style",
        traits=traits,
        provenance={"history_window": k, "template_versions": template_versions()},
    )


__all__ = [
    "baseline_agent4rec_style",
    "baseline_recagent_style",
    "baseline_recent_interaction",
    "empty_profile",
]
